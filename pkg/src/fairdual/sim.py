"""Jensen-gap study on synthetic data: full-batch versus mini-batch optimization
of the power-form group objective ``b^T e^{1+t}``.

Each swept point trains a matrix-factorization model with mini-batches over
users and reports how far the reached point is from the full-information
optimum, measured in the full objective.

The per-group loss ``e_g`` is the mean pair loss over training pairs whose
item belongs to ``g`` (membership-weighted by the adjacency rows). The
objective includes a ridge term ``ridge/2 ||theta||^2``; without it the
training pairs are separable and no finite optimum exists.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import minimize

from .baselines import BaselineWeighter, StrategyKind
from .data import SyntheticSpec, generate_synthetic
from .dual import init_dual, momentum_update, project_dual
from .groups import NormalizedAdjacency, build_adjacency
from .metrics import group_utilities, mmf_from_utilities, ndcg_at_k
from .model import top_k

log = logging.getLogger(__name__)

CSV_COLUMNS = ("B", "G", "strategy", "seed", "jensen_gap", "ndcg@K", "mmf@K", "runtime_ms")
UNSUPPORTED = (StrategyKind.MAXMIN_SAMPLE,)


class ReferenceNotConverged(RuntimeError):
    pass


def full_info_loss(w, adj: NormalizedAdjacency, b_vec, t: float) -> float:
    """``b^T (A_hat^T w)^{1+t}`` for non-negative per-item losses ``w``."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("per-item losses must be non-negative")
    return float(np.dot(b_vec, adj.tdot(w) ** (1.0 + t)))


def minibatch_objective(partitioned_e: Sequence, b_vec, t: float) -> float:
    """``sum_j b^T e_j^{1+t}`` over the per-batch group vectors ``e_j``."""
    b_vec = np.asarray(b_vec, dtype=float)
    total = 0.0
    for e in partitioned_e:
        e = np.asarray(e, dtype=float)
        if e.shape != b_vec.shape:
            raise ValueError(f"group vector shape {e.shape} does not match b {b_vec.shape}")
        if np.any(e < 0):
            raise ValueError("group losses must be non-negative")
        total += float(np.dot(b_vec, e ** (1.0 + t)))
    return total


@dataclass(frozen=True)
class SimConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    t: float = 1.0
    b_vec: Optional[tuple] = None  # all-ones when None
    batch_sizes: tuple = (8, 16, 32, 64, 128)
    group_sizes: tuple = (7,)
    strategies: tuple = ("uni", "fairdual")
    epochs: int = 20
    seed: int = 0
    num_seeds: int = 1
    # explicit (B, G) points; overrides the Cartesian product when set
    points: Optional[tuple] = None
    d: int = 8
    ridge: float = 3e-5
    # per-user step; the batch step is learning_rate * B, decayed linearly to 0
    learning_rate: float = 0.25
    # dual step at batch size dual_eta_batch; scaled as (dual_eta_batch / B)^(1/2)
    dual_eta: float = 0.1
    dual_eta_batch: Optional[int] = 32
    dual_lambda: float = 2.0
    dual_alpha: float = 0.9
    temperature: float = 1.0
    init_scale: float = 0.1
    ref_tol: float = 1e-6
    ref_max_iter: int = 50_000
    ref_restarts: int = 1
    K: int = 10

    def validate(self) -> None:
        if self.t < 0:
            raise ValueError("t must be >= 0")
        if self.b_vec is not None and not all(x > 0 for x in self.b_vec):
            raise ValueError("b_vec must be positive")
        if self.epochs < 1 or self.num_seeds < 1 or self.ref_restarts < 1:
            raise ValueError("epochs, num_seeds and ref_restarts must be >= 1")
        for B, G in self.grid():
            if B < 1 or B > self.synthetic.num_users:
                raise ValueError(f"batch size {B} out of range")
            if G < 1:
                raise ValueError(f"group count {G} out of range")
        for s in self.strategies:
            if StrategyKind.parse(s) in UNSUPPORTED:
                raise ValueError(f"strategy {s!r} is not supported by the gap simulation")

    def grid(self) -> list[tuple[int, int]]:
        if self.points is not None:
            return [(int(B), int(G)) for B, G in self.points]
        return [(int(B), int(G)) for G in self.group_sizes for B in self.batch_sizes]

    def seeds(self) -> list[int]:
        return list(range(self.seed, self.seed + self.num_seeds))

    def b_for(self, G: int) -> np.ndarray:
        if self.b_vec is None:
            return np.ones(G)
        b = np.asarray(self.b_vec, dtype=float)
        if b.shape != (G,):
            raise ValueError(f"b_vec has {len(b)} entries but G={G}")
        return b


def _logistic_loss(x, c):
    """Symmetric log-loss and probability, stable for any logit."""
    e = np.exp(-np.abs(x))
    loss = np.maximum(x, 0.0) - c * x + np.log1p(e)
    p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return loss, p


class PowerObjective:
    """``F(theta) = b^T e(theta)^{1+t} + ridge/2 ||theta||^2`` on one data set."""

    def __init__(self, users, items, labels, adj: NormalizedAdjacency, num_users: int,
                 num_items: int, d: int, b_vec, t: float, ridge: float):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=float)
        self.adj = adj
        self.num_users, self.num_items, self.d = num_users, num_items, d
        self.b = np.asarray(b_vec, dtype=float)
        self.t, self.ridge = float(t), float(ridge)
        self.pair_adj = adj.toarray()[self.items]
        self.n = self.pair_adj.sum(axis=0)
        if np.any(self.n <= 0):
            raise ValueError("a group has no training pairs")
        n_pairs = len(self.users)
        ones = np.ones(n_pairs)
        self._user_of = sparse.csr_matrix((ones, (self.users, np.arange(n_pairs))),
                                          shape=(num_users, n_pairs))
        self._item_of = sparse.csr_matrix((ones, (self.items, np.arange(n_pairs))),
                                          shape=(num_items, n_pairs))

    @property
    def size(self) -> int:
        return (self.num_users + self.num_items) * self.d

    def unpack(self, theta):
        k = self.num_users * self.d
        return (theta[:k].reshape(self.num_users, self.d),
                theta[k:].reshape(self.num_items, self.d))

    def pair_losses(self, theta):
        U, V = self.unpack(theta)
        x = np.einsum("bd,bd->b", U[self.users], V[self.items])
        return _logistic_loss(x, self.labels)

    def group_losses(self, theta) -> np.ndarray:
        loss, _ = self.pair_losses(theta)
        return self.pair_adj.T @ loss / self.n

    def item_losses(self, theta) -> np.ndarray:
        loss, _ = self.pair_losses(theta)
        return np.bincount(self.items, weights=loss, minlength=self.num_items)

    def value(self, theta) -> float:
        e = self.group_losses(theta)
        return float(self.b @ e ** (1 + self.t) + 0.5 * self.ridge * theta @ theta)

    def value_and_grad(self, theta):
        U, V = self.unpack(theta)
        loss, p = self.pair_losses(theta)
        e = self.pair_adj.T @ loss / self.n
        F = float(self.b @ e ** (1 + self.t) + 0.5 * self.ridge * theta @ theta)
        mult = (1 + self.t) * self.b * e ** self.t / self.n
        gx = (p - self.labels) * (self.pair_adj @ mult)
        gU = self._user_of @ (gx[:, None] * V[self.items])
        gV = self._item_of @ (gx[:, None] * U[self.users])
        return F, np.concatenate([gU.ravel(), gV.ravel()]) + self.ridge * theta

    def minibatch_value(self, theta, batches) -> float:
        """Partitioned objective ``sum_j b^T e_j^{1+t}`` plus the (unpartitioned) ridge."""
        loss, _ = self.pair_losses(theta)
        parts = [self.pair_adj[idx].T @ loss[idx] / self.n for idx in batches]
        return minibatch_objective(parts, self.b, self.t) + 0.5 * self.ridge * theta @ theta


def full_batch_reference(obj: PowerObjective, rng, restarts: int = 1, tol: float = 1e-6,
                         max_iter: int = 50_000, init_scale: float = 0.1):
    """Best of ``restarts`` L-BFGS runs; raises if none reaches gradient norm ``tol``."""
    best = None
    for _ in range(restarts):
        theta0 = rng.normal(scale=init_scale, size=obj.size)
        res = minimize(obj.value_and_grad, theta0, jac=True, method="L-BFGS-B",
                       options=dict(maxiter=max_iter, maxfun=2 * max_iter, gtol=tol * 1e-3,
                                    ftol=1e-15, maxcor=20))
        gnorm = float(np.linalg.norm(obj.value_and_grad(res.x)[1]))
        if gnorm <= tol and (best is None or res.fun < best[1]):
            best = (res.x, float(res.fun), gnorm)
    if best is None:
        raise ReferenceNotConverged(
            f"full-batch reference did not reach gradient norm {tol} in {max_iter} iterations")
    return best


def _equal_partitions(perm_users: np.ndarray, B: int) -> list[np.ndarray]:
    nb = -(-len(perm_users) // B)
    return np.array_split(perm_users, nb)


def train_minibatch(obj: PowerObjective, theta0, B: int, strategy, cfg: SimConfig, rng):
    """Mini-batch training from ``theta0``; returns ``(theta, last-epoch partition)``.

    Batches partition the users into ``ceil(N / B)`` near-equal parts. Every
    strategy steps along a weighted sum of pair-loss gradients:

    * ``uni`` plugs the batch group means into the power objective, weights
      ``(1+t) b_g e_{j,g}^t`` per group;
    * ``fairdual`` uses group weights ``kappa_g (1 - mu_g)``, where ``mu`` is
      the dual variable driven toward the level at which the weights match the
      full objective's, ``kappa`` comes from the first batch;
    * other baselines supply per-sample weights on the batch mean loss.
    """
    kind = StrategyKind.parse(strategy)
    if kind in UNSUPPORTED:
        raise ValueError(f"strategy {strategy!r} is not supported by the gap simulation")
    t, b = obj.t, obj.b
    G = len(b)
    U, V = (a.copy() for a in obj.unpack(np.array(theta0, dtype=float)))
    order = np.argsort(obj.users, kind="stable")
    starts = np.concatenate([[0], np.cumsum(np.bincount(obj.users, minlength=obj.num_users))])

    weighter = None
    if kind not in (StrategyKind.UNI, StrategyKind.FAIRDUAL):
        weighter = BaselineWeighter.create(kind, obj.adj, train_items=obj.items,
                                           temperature=cfg.temperature)
    state = None
    if kind is StrategyKind.FAIRDUAL:
        eta = cfg.dual_eta
        if cfg.dual_eta_batch:
            eta *= np.sqrt(cfg.dual_eta_batch / B)
        state = init_dual(obj.n / obj.n.sum(), eta, cfg.dual_lambda, cfg.dual_alpha)
    kappa = None

    nb = -(-obj.num_users // B)
    total = cfg.epochs * nb
    step = 0
    batches: list[np.ndarray] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(obj.num_users)
        batches = []
        for users in _equal_partitions(perm, B):
            idx = np.concatenate([order[starts[u]:starts[u + 1]] for u in users]) \
                if B < obj.num_users else np.arange(len(obj.users))
            batches.append(idx)
            u, i, c = obj.users[idx], obj.items[idx], obj.labels[idx]
            loss, p = _logistic_loss(np.einsum("bd,bd->b", U[u], V[i]), c)
            A = obj.pair_adj[idx]
            nj = A.sum(axis=0)
            present = nj > 0
            ej = np.zeros(G)
            ej[present] = (A.T @ loss)[present] / nj[present]
            if kappa is None:
                kappa = np.where(present, (1 + t) * b * ej ** t, 0.0)
                kappa[~present] = kappa[present].mean()

            if kind is StrategyKind.UNI:
                mult = (1 + t) * b * ej ** t
            elif kind is StrategyKind.FAIRDUAL:
                mult = kappa * (1.0 - state.mu)
            else:
                mult = None

            if mult is not None:
                w = A @ np.divide(mult, nj, out=np.zeros(G), where=present)
            else:
                s = weighter.weights(i, loss, p)
                w = s * (G * kappa.mean() / len(idx))
            gx = (p - c) * w
            lr = cfg.learning_rate * B * (1.0 - step / total)
            Uu, Vi = U[u], V[i]
            np.add.at(U, u, -lr * gx[:, None] * Vi)
            np.add.at(V, i, -lr * gx[:, None] * Uu)
            U *= 1.0 - lr * obj.ridge
            V *= 1.0 - lr * obj.ridge

            if kind is StrategyKind.FAIRDUAL:
                # the group level matching weight kappa(1 - mu), from the conjugate of x^{1+t}
                target = np.maximum(kappa * (1.0 - state.mu) / (b * (1 + t)), 0.0) ** (1.0 / t) \
                    if t > 0 else ej
                g_tilde = np.where(present, kappa * (ej - target), 0.0)
                project_dual(state, momentum_update(state, g_tilde))
            step += 1
    theta = np.concatenate([U.ravel(), V.ravel()])
    return theta, batches


def _evaluate(obj: PowerObjective, theta, split, catalog, K: int):
    U, V = obj.unpack(theta)
    scores = U @ V.T
    train = split.train
    pos = train.labels == 1
    scores[train.users[pos], train.items[pos]] = -np.inf
    ranked = top_k(scores, K)
    truth = split.positives("test")
    rankings = [list(r) for r in ranked]
    ndcg = ndcg_at_k(rankings, truth, K)
    mmf = mmf_from_utilities(group_utilities(rankings, obj.adj, K, catalog.m))
    return ndcg, mmf


@dataclass
class SweepRow:
    B: int
    G: int
    strategy: str
    seed: int
    jensen_gap: float
    ndcg: Optional[float]
    mmf: Optional[float]
    runtime_ms: float
    full_objective: float = float("nan")
    reference_objective: float = float("nan")
    minibatch_objective: float = float("nan")

    def csv_row(self) -> list:
        na = lambda v: "NA" if v is None else repr(float(v))
        return [self.B, self.G, self.strategy, self.seed, repr(self.jensen_gap),
                na(self.ndcg), na(self.mmf), f"{self.runtime_ms:.1f}"]


def _run_unit(cfg: SimConfig, G: int, seed: int, batch_sizes: list[int]) -> list[SweepRow]:
    """Reference plus all (B, strategy) runs sharing one synthetic data set."""
    spec = replace(cfg.synthetic, num_groups=G, seed=seed)
    split, catalog, _ = generate_synthetic(spec)
    adj = build_adjacency(catalog)
    tr = split.train
    obj = PowerObjective(tr.users, tr.items, tr.labels, adj, split.num_users,
                         split.num_items, cfg.d, cfg.b_for(G), cfg.t, cfg.ridge)
    t0 = time.perf_counter()
    ref_rng = np.random.default_rng(np.random.SeedSequence([seed, G]))
    theta_star, F_star, gnorm = full_batch_reference(obj, ref_rng, cfg.ref_restarts,
                                                     cfg.ref_tol, cfg.ref_max_iter,
                                                     cfg.init_scale)
    log.info("G=%d seed=%d reference F=%.6g |grad|=%.1e (%.1fs)", G, seed, F_star, gnorm,
             time.perf_counter() - t0)
    rows = []
    for B in batch_sizes:
        for s in cfg.strategies:
            kind = StrategyKind.parse(s)
            # strategies share the batch order at a point (paired comparison)
            rng = np.random.default_rng(np.random.SeedSequence([seed, B, G]))
            t0 = time.perf_counter()
            theta, batches = train_minibatch(obj, theta_star, B, kind, cfg, rng)
            F = obj.value(theta)
            LB = obj.minibatch_value(theta, batches)
            ndcg, mmf = _evaluate(obj, theta, split, catalog, cfg.K)
            ms = 1e3 * (time.perf_counter() - t0)
            rows.append(SweepRow(B, G, kind.value, seed, abs(F - F_star), ndcg, mmf, ms,
                                 F, F_star, LB))
    return rows


def run_gap_sweep(config: SimConfig, jobs: int = 1) -> list[SweepRow]:
    """Sweep every configured (B, G) point, strategy and seed.

    Mini-batch runs start from the full-batch optimum, so the reported gap is
    the drift of each procedure's stationary point away from it.
    """
    config.validate()
    units: dict[tuple[int, int], list[int]] = {}
    for B, G in config.grid():
        for seed in config.seeds():
            bs = units.setdefault((G, seed), [])
            if B not in bs:
                bs.append(B)
    tasks = [(config, G, seed, bs) for (G, seed), bs in units.items()]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_unit_star, tasks))
    else:
        results = [_run_unit(*task) for task in tasks]
    rows = [r for chunk in results for r in chunk]
    rows.sort(key=lambda r: (r.G, r.B, r.strategy, r.seed))
    return rows


def _run_unit_star(args):
    return _run_unit(*args)


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


def median_gaps(rows: Sequence[SweepRow]) -> dict:
    """``{(B, G, strategy): median jensen_gap over seeds}``."""
    acc: dict = {}
    for r in rows:
        acc.setdefault((r.B, r.G, r.strategy), []).append(r.jensen_gap)
    return {k: float(np.median(v)) for k, v in acc.items()}
