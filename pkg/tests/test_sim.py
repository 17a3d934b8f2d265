import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairdual.data import SyntheticSpec, generate_synthetic
from fairdual.groups import GroupCatalog, build_adjacency
from fairdual.sim import (CSV_COLUMNS, PowerObjective, ReferenceNotConverged, SimConfig,
                          full_batch_reference, full_info_loss, median_gaps,
                          minibatch_objective, run_gap_sweep, train_minibatch,
                          write_sweep_csv)

SMALL = SyntheticSpec(num_users=40, num_items=30, num_groups=3, positives_per_user=4)


def small_objective(t=1.0, ridge=1e-2, d=3):
    split, catalog, _ = generate_synthetic(SMALL)
    tr = split.train
    adj = build_adjacency(catalog)
    return PowerObjective(tr.users, tr.items, tr.labels, adj, split.num_users,
                          split.num_items, d, np.ones(3), t, ridge)


ADJ = build_adjacency(GroupCatalog.from_pairs([(0, 0), (1, 1), (2, 0), (2, 1), (3, 2)]))


def test_full_info_loss_examples(rng):
    b = np.array([1.0, 2.0, 0.5])
    w = rng.random(4)
    assert full_info_loss(w, ADJ, b, 0.0) == pytest.approx(b @ ADJ.tdot(w))
    assert full_info_loss(np.zeros(4), ADJ, b, 1.5) == 0.0
    A = ADJ.toarray()
    loop = sum(b[g] * sum(A[i, g] * w[i] for i in range(4)) ** 2.5 for g in range(3))
    assert full_info_loss(w, ADJ, b, 1.5) == pytest.approx(loop, rel=1e-12)
    with pytest.raises(ValueError):
        full_info_loss([-1, 0, 0, 0], ADJ, b, 1.0)


def test_minibatch_objective_examples(rng):
    b = np.array([1.0, 2.0, 0.5])
    w = rng.random(4)
    e = ADJ.tdot(w)
    assert minibatch_objective([e], b, 1.0) == pytest.approx(full_info_loss(w, ADJ, b, 1.0))
    parts = [rng.random(3) for _ in range(4)]
    assert minibatch_objective(parts, b, 0.0) == pytest.approx(b @ np.sum(parts, axis=0))
    with pytest.raises(ValueError):
        minibatch_objective([np.ones(2)], b, 1.0)
    with pytest.raises(ValueError):
        minibatch_objective([-np.ones(3)], b, 1.0)


@given(st.floats(0.01, 100), st.floats(0.05, 3), st.integers(1, 30))
def test_equal_split_refinement_closed_form(total, t, p):
    b = np.ones(1)
    value = minibatch_objective([np.array([total / p])] * p, b, t)
    assert value == pytest.approx(total ** (1 + t) / p ** t, rel=1e-9)
    finer = minibatch_objective([np.array([total / (p + 1)])] * (p + 1), b, t)
    assert finer <= value * (1 + 1e-12)


@given(st.lists(st.floats(0, 10), min_size=2, max_size=8), st.floats(0.05, 3))
def test_partitioning_underestimates(parts, t):
    # superadditivity of x^{1+t}: splitting never increases the sum
    whole = minibatch_objective([np.array([sum(parts)])], np.ones(1), t)
    split = minibatch_objective([np.array([x]) for x in parts], np.ones(1), t)
    assert split <= whole * (1 + 1e-12) + 1e-300


def test_objective_gradient_finite_differences(rng):
    obj = small_objective()
    theta = rng.normal(scale=0.3, size=obj.size)
    _, grad = obj.value_and_grad(theta)
    h = 1e-6
    for j in rng.choice(obj.size, 25, replace=False):
        e = np.zeros(obj.size)
        e[j] = h
        fd = (obj.value(theta + e) - obj.value(theta - e)) / (2 * h)
        assert fd == pytest.approx(grad[j], rel=1e-4, abs=1e-8)


def test_minibatch_value_single_batch_equals_full(rng):
    obj = small_objective()
    theta = rng.normal(scale=0.3, size=obj.size)
    assert obj.minibatch_value(theta, [np.arange(len(obj.users))]) == pytest.approx(obj.value(theta))


def test_reference_converges_and_is_stationary(rng):
    obj = small_objective()
    theta, F, gnorm = full_batch_reference(obj, rng, restarts=2, tol=1e-6)
    assert gnorm <= 1e-6 and F == pytest.approx(obj.value(theta))


def test_reference_nonconvergence_raises(rng):
    obj = small_objective()
    with pytest.raises(ReferenceNotConverged):
        full_batch_reference(obj, rng, tol=1e-12, max_iter=3)


@pytest.mark.parametrize("strategy", ["uni", "fairdual", "dro", "sdro", "ifairlrs", "prop"])
def test_single_batch_has_no_gap(strategy, rng):
    obj = small_objective()
    theta, F, _ = full_batch_reference(obj, rng)
    cfg = SimConfig(synthetic=SMALL, epochs=3, learning_rate=0.01, d=3)
    out, batches = train_minibatch(obj, theta, SMALL.num_users, strategy, cfg,
                                   np.random.default_rng(0))
    assert len(batches) == 1
    if strategy in ("uni", "fairdual"):
        assert abs(obj.value(out) - F) <= 1e-3 * abs(F)


def test_maxmin_unsupported(rng):
    obj = small_objective()
    with pytest.raises(ValueError, match="not supported"):
        train_minibatch(obj, np.zeros(obj.size), 8, "maxmin", SimConfig(), rng)
    with pytest.raises(ValueError):
        SimConfig(strategies=("maxmin",)).validate()


def test_config_validation_and_grid():
    with pytest.raises(ValueError):
        SimConfig(t=-1).validate()
    with pytest.raises(ValueError):
        SimConfig(b_vec=(1.0, -1.0)).validate()
    cfg = SimConfig(batch_sizes=(32,), group_sizes=(3, 5, 7, 9))
    assert cfg.grid() == [(32, 3), (32, 5), (32, 7), (32, 9)]
    assert SimConfig(points=((8, 7), (32, 3))).grid() == [(8, 7), (32, 3)]
    assert SimConfig(seed=4, num_seeds=3).seeds() == [4, 5, 6]
    with pytest.raises(ValueError):
        SimConfig(b_vec=(1.0, 2.0)).b_for(3)


def test_small_sweep_rows_and_csv(tmp_path):
    cfg = SimConfig(synthetic=SMALL, batch_sizes=(8, 40), group_sizes=(2, 3),
                    strategies=("uni", "fairdual"), epochs=2, d=3, ridge=1e-2, K=5)
    rows = run_gap_sweep(cfg)
    assert len(rows) == 2 * 2 * 2
    assert {(r.B, r.G) for r in rows} == {(8, 2), (40, 2), (8, 3), (40, 3)}
    for r in rows:
        assert r.jensen_gap >= 0 and r.runtime_ms > 0
        assert r.jensen_gap == pytest.approx(abs(r.full_objective - r.reference_objective))
    path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, path)
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == CSV_COLUMNS
    assert len(table) == 1 + len(rows)
    gaps = median_gaps(rows)
    assert set(gaps) == {(r.B, r.G, r.strategy) for r in rows}


def test_sweep_deterministic():
    cfg = SimConfig(synthetic=SMALL, batch_sizes=(8,), group_sizes=(3,),
                    strategies=("uni", "fairdual"), epochs=2, d=3, ridge=1e-2, K=5)
    a, b = run_gap_sweep(cfg), run_gap_sweep(cfg)
    assert [r.jensen_gap for r in a] == [r.jensen_gap for r in b]
