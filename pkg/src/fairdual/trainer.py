"""End-to-end training loop: freeze-refresh cycle, sample weighting, primal SGD
step, score estimation and the dual update, plus run-directory outputs."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as mdl
from .baselines import BaselineWeighter, RunningGroupLosses, StrategyKind, maxmin_sample
from .data import (Batch, DatasetSplit, Interactions, SyntheticSpec, chronological_split,
                   generate_synthetic, read_group_pairs, read_interactions, shuffled_batches)
from .dual import (DualState, estimate_scores, init_dual, momentum_update, project_dual,
                   sample_weights, subgradient, update_reward)
from .groups import GroupCatalog, build_adjacency
from .metrics import MetricsReport, evaluate_rankings, rows_to_csv

log = logging.getLogger(__name__)

ETA_RANGE = (1e-4, 1e-2)
M_SCALES = ("size", "mean")


# named overrides on top of the RunConfig defaults
PRESETS = {
    "default": {},
    # lambda trade-off study: groups of equal popularity, negatives contribute to the loss
    "lambda-study": {"symmetric_loss": True, "synthetic_group_bias": 0.0},
}


def preset_config(name: str, **overrides) -> "RunConfig":
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset; choose from {sorted(PRESETS)}")
    return RunConfig(**{**PRESETS[name], **overrides}).validate()


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "fairdual"
    eta: float = 1e-3
    lam: float = 2.0
    alpha: float = 0.9
    beta: int = 640
    batch_size: int = 64
    q: int = 200
    k: int = 10
    d: int = 32
    epochs: int = 5
    learning_rate: float = 0.05
    seed: int = 0
    persist_dual: bool = False
    eval_every: int = 1
    eval_ks: tuple = (5, 10, 20)
    symmetric_loss: bool = False
    # "size": m_g = |I_g|; "mean": group sizes rescaled to mean 1
    m_scale: str = "size"
    # keep mu at 0 (dual bookkeeping still runs)
    pin_dual: bool = False
    temperature: float = 1.0
    init_scale: float = 0.1
    interactions: str = ""
    groups: str = ""
    synthetic_users: int = 1000
    synthetic_items: int = 1000
    synthetic_groups: int = 7
    synthetic_seed: int = 0
    synthetic_skew: float = 0.0
    synthetic_group_bias: float = 1.0

    KEY_ALIASES = {"lambda": "lam", "batch-size": "batch_size", "Q": "q", "K": "k"}

    @property
    def kind(self) -> StrategyKind:
        return StrategyKind.parse(self.strategy)

    def validate(self) -> "RunConfig":
        try:
            self.kind
        except ValueError as exc:
            raise ConfigError("strategy", str(exc)) from None
        checks = [
            ("eta", ETA_RANGE[0] <= self.eta <= ETA_RANGE[1],
             f"must lie in [{ETA_RANGE[0]}, {ETA_RANGE[1]}]"),
            ("lambda", self.lam >= 0, "must be >= 0"),
            ("alpha", 0 <= self.alpha < 1, "must lie in [0, 1)"),
            ("beta", self.beta >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("k", self.k >= 1, "must be >= 1"),
            ("q", self.q >= self.k, "must be >= k"),
            ("d", self.d >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("learning_rate", self.learning_rate > 0, "must be positive"),
            ("eval_every", self.eval_every >= 1, "must be >= 1"),
            ("eval_ks", len(self.eval_ks) > 0 and all(x >= 1 for x in self.eval_ks),
             "must be positive integers"),
            ("m_scale", self.m_scale in M_SCALES, f"must be one of {M_SCALES}"),
            ("temperature", self.temperature > 0, "must be positive"),
            ("synthetic_group_bias", self.synthetic_group_bias >= 0, "must be >= 0"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        out["eval_ks"] = list(self.eval_ks)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        """Build from string or typed values; unknown keys and bad values raise ConfigError."""
        types = {f.name: f.type for f in fields(cls)}
        defaults = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for raw_key, value in mapping.items():
            key = cls.KEY_ALIASES.get(raw_key, raw_key).replace("-", "_")
            if key not in types:
                raise ConfigError(raw_key, "unknown key")
            try:
                kwargs[key] = _coerce(value, type(defaults[key]))
            except (TypeError, ValueError):
                raise ConfigError(raw_key, f"cannot parse value {value!r}") from None
        return cls(**kwargs).validate()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


def _coerce(value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ValueError(value)
    if kind is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        text = str(value).strip().strip("[]")
        return tuple(int(v) for v in text.replace(";", ",").split(",") if v.strip())
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return int(str(value).strip()) if isinstance(value, str) else int(value)
    if kind is float:
        return float(value)
    return str(value).strip().strip('"').strip("'")


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(line, f"line {n}: empty key")
        out[key] = value
    return out


def load_config(path) -> RunConfig:
    return RunConfig.from_mapping(parse_config_text(Path(path).read_text()))


def group_weights(catalog: GroupCatalog, m_scale: str) -> np.ndarray:
    m = np.asarray(catalog.m, dtype=float)
    if m_scale == "mean":
        return m / m.mean()
    return m


def sample_frozen_items(model: mdl.EmbeddingModel, Q: int, rng) -> np.ndarray:
    """``Q`` distinct rows of the frozen item table, uniformly at random."""
    if Q > model.num_items:
        raise ValueError(f"Q={Q} exceeds number of items {model.num_items}")
    return model.frozen_item_table[rng.choice(model.num_items, size=Q, replace=False)]


def budget_scale(adj, train_items, m, K: int) -> float:
    """Factor putting estimated ranking mass in the units of the budgets ``m``.

    Chosen so that no group can spend more than its budget within one epoch,
    since each sample's estimate is at most ``K``.
    """
    counts = np.bincount(np.asarray(train_items, dtype=np.int64), minlength=adj.shape[0])
    mass = adj.tdot(counts.astype(float))
    active = mass > 0
    if not active.any():
        return 1.0
    return float(np.min(np.asarray(m)[active] / (K * mass[active])))


def evaluate_model(model: mdl.EmbeddingModel, split: DatasetSplit, catalog: GroupCatalog,
                   ks=(5, 10, 20), part: str = "test", chunk: int = 2048) -> MetricsReport:
    """Rank the full catalog for every user, excluding the user's training positives."""
    kmax = min(max(ks), model.num_items)
    train = split.train
    pos = train.labels == 1
    rankings = []
    for start in range(0, model.num_users, chunk):
        users = np.arange(start, min(start + chunk, model.num_users))
        scores = mdl.score_matrix(model, users)
        mask = pos & (train.users >= start) & (train.users < start + len(users))
        scores[train.users[mask] - start, train.items[mask]] = -np.inf
        rankings.extend(mdl.top_k(scores, kmax).tolist())
    truth = split.positives(part)
    return evaluate_rankings(rankings, truth, catalog, ks=[k for k in ks if k <= kmax])


@dataclass
class TrainResult:
    model: mdl.EmbeddingModel
    history: list = field(default_factory=list)  # (epochs completed, MetricsReport)
    dual: Optional[DualState] = None
    batches: int = 0
    runtime_s: float = 0.0

    def metrics_rows(self) -> list[dict]:
        rows = []
        for epoch, report in self.history:
            rows.extend(report.rows(epoch=epoch))
        return rows

    def metrics_csv(self) -> str:
        return rows_to_csv(self.metrics_rows())


def _epoch_batches(config: RunConfig, split: DatasetSplit, adj, running, epoch: int,
                   shuffle_seed: int, sampler_rng):
    if config.kind is StrategyKind.MAXMIN_SAMPLE:
        train = split.train
        nb = -(-len(train) // config.batch_size)
        for j in range(nb):
            idx = maxmin_sample(train.items, adj, running, config.batch_size, sampler_rng,
                                config.temperature)
            yield Batch(train[idx], j, epoch)
    else:
        yield from shuffled_batches(split, config.batch_size, shuffle_seed, epoch)


def train(config: RunConfig, split: DatasetSplit, catalog: GroupCatalog,
          initial: Optional[mdl.EmbeddingModel] = None,
          trace: Optional[list] = None) -> TrainResult:
    """Run the configured strategy for ``config.epochs`` epochs.

    Per batch: snapshot refresh check, per-sample losses, weights, one SGD
    step, then (FairDual only) score estimation over ``q`` sampled frozen
    items, subgradient with the pre-update reward, momentum, reward update and
    projection. Weights use ``mu`` from the previous batch. When ``trace`` is
    a list, one dict per batch is appended with the dual quantities.
    """
    config.validate()
    kind = config.kind
    init_ss, shuffle_ss, dual_ss, sampler_ss = np.random.SeedSequence(config.seed).spawn(4)
    if initial is None:
        model = mdl.init_model(split.num_users, split.num_items, config.d,
                               np.random.default_rng(init_ss), config.init_scale,
                               config.learning_rate, config.beta, config.symmetric_loss)
    else:
        model = initial.copy()
        model.learning_rate, model.beta = config.learning_rate, config.beta
        model.symmetric_loss = config.symmetric_loss
    if (model.num_users, model.num_items) != (split.num_users, split.num_items):
        raise ValueError("model dimensions do not match the data split")
    if catalog.num_items != split.num_items:
        raise ValueError("group catalog does not cover the item set")

    adj = build_adjacency(catalog)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dual_rng = np.random.default_rng(dual_ss)
    sampler_rng = np.random.default_rng(sampler_ss)

    dual = None
    scale = 1.0
    weighter = None
    running = RunningGroupLosses(catalog.num_groups)
    if kind is StrategyKind.FAIRDUAL:
        m = group_weights(catalog, config.m_scale)
        dual = init_dual(m, config.eta, config.lam, config.alpha)
        scale = budget_scale(adj, split.train.items, m, config.k)
    elif kind is not StrategyKind.UNI:
        weighter = BaselineWeighter.create(kind, adj, train_items=split.train.items,
                                           temperature=config.temperature)
        running = weighter.running

    result = TrainResult(model=model, dual=dual)
    counter = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        if dual is not None:
            dual.reset_reward()
        shuffle_seed = int(shuffle_rng.integers(2**63))
        for batch in _epoch_batches(config, split, adj, running, epoch, shuffle_seed,
                                    sampler_rng):
            try:
                _train_batch(config, kind, model, batch.interactions, adj, dual, weighter,
                             scale, counter, dual_rng, trace, epoch, batch.batch_index)
            except Exception as exc:
                raise TrainingError(f"epoch {epoch}, batch {batch.batch_index}: {exc}") from exc
            counter += 1
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            report = evaluate_model(model, split, catalog, config.eval_ks)
            result.history.append((epoch + 1, report))
            log.info("epoch %d: %s", epoch + 1, report.to_json())
    result.batches = counter
    result.runtime_s = time.perf_counter() - t0
    return result


def _train_batch(config, kind, model, inter: Interactions, adj, dual, weighter, scale,
                 counter, dual_rng, trace, epoch, batch_index):
    refreshed = mdl.maybe_refresh_snapshot(model, counter, config.beta)
    if refreshed and dual is not None and not config.persist_dual:
        dual.reset()
    users, items, labels = inter.users, inter.items, inter.labels
    batch_adj = adj.rows(items)
    if dual is not None:
        s = sample_weights(batch_adj, dual.mu)
    elif weighter is not None:
        p, losses = mdl.forward(model, users, items, labels)
        s = weighter.weights(items, losses, p)
    else:
        s = np.ones(len(inter))
    mdl.sgd_step(model, users, items, labels, s)
    if dual is None:
        return
    E = sample_frozen_items(model, config.q, dual_rng)
    w_tilde = scale * estimate_scores(model.user_table[users], E, config.k)
    g_tilde = subgradient(batch_adj, w_tilde, dual.gamma)
    g = momentum_update(dual, g_tilde)
    update_reward(dual, batch_adj, w_tilde)
    if not config.pin_dual:
        project_dual(dual, g)
    if trace is not None:
        trace.append({"epoch": epoch, "batch": batch_index, "items": items.tolist(),
                      "s": s.tolist(), "w_tilde": w_tilde.tolist(),
                      "g_tilde": g_tilde.tolist(), "momentum": dual.momentum.tolist(),
                      "gamma": dual.gamma.tolist(), "mu": dual.mu.tolist(),
                      "refreshed": refreshed})


def load_dataset(config: RunConfig):
    """``(split, catalog, inputs_hash)`` from the configured files or synthetic preset."""
    if bool(config.interactions) != bool(config.groups):
        raise ConfigError("interactions" if not config.interactions else "groups",
                          "interactions and groups files must be given together")
    if config.interactions:
        for key in ("interactions", "groups"):
            if not Path(getattr(config, key)).is_file():
                raise ConfigError(key, f"no such file: {getattr(config, key)}")
        split = chronological_split(read_interactions(config.interactions))
        catalog = GroupCatalog.from_pairs(read_group_pairs(config.groups),
                                          item_ids=split.item_ids)
        return split, catalog, content_hash(config.interactions, config.groups)
    spec = SyntheticSpec(num_users=config.synthetic_users, num_items=config.synthetic_items,
                         num_groups=config.synthetic_groups, seed=config.synthetic_seed,
                         group_size_skew=config.synthetic_skew,
                         group_bias_std=config.synthetic_group_bias)
    try:
        split, catalog, _ = generate_synthetic(spec)
    except ValueError as exc:
        raise ConfigError("synthetic_groups", str(exc)) from None
    return split, catalog, content_hash(dataclasses.asdict(spec))


# ---- run directories -------------------------------------------------------

def content_hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (str, Path)) and Path(p).is_file():
            h.update(Path(p).read_bytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()


class RunExistsError(FileExistsError):
    pass


def prepare_run_dir(path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise RunExistsError(f"{path} already holds a run; pass --force to overwrite")
    (path / "checkpoints").mkdir(parents=True, exist_ok=True)
    return path


def write_run(run_dir, config: RunConfig, result: TrainResult, inputs_hash: str,
              argv: Optional[list] = None) -> None:
    run_dir = Path(run_dir)
    (run_dir / "metrics.csv").write_text(result.metrics_csv())
    ckpt = run_dir / "checkpoints" / "model.bin"
    mdl.save_checkpoint(result.model, ckpt, extra={"strategy": config.strategy})
    if result.dual is not None:
        (run_dir / "checkpoints" / "dual.json").write_text(result.dual.to_json())
    manifest = {
        "config": config.to_dict(),
        "inputs_sha256": inputs_hash,
        "argv": list(argv or []),
        "model_sha256": result.model.checksum(),
        "batches": result.batches,
        "runtime_s": round(result.runtime_s, 3),
        "final_metrics": result.history[-1][1].to_dict() if result.history else None,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
