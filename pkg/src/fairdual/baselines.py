"""Per-batch sample-weighting strategies used as comparison points.

All weighted strategies emit one non-negative weight per batch sample.
Group-level quantities are mapped onto samples through the rows of the
normalized adjacency, so an item in several groups receives the
membership-averaged value.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import softmax

from .groups import NormalizedAdjacency

EMA_DECAY = 0.9
DEFAULT_TEMPERATURE = 1.0


class StrategyKind(str, enum.Enum):
    UNI = "uni"
    DRO = "dro"
    SDRO = "sdro"
    PROP = "prop"
    IFAIRLRS = "ifairlrs"
    MAXMIN_SAMPLE = "maxmin"
    FAIRDUAL = "fairdual"

    @classmethod
    def parse(cls, name: str) -> "StrategyKind":
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {"maxminsample": "maxmin"}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown strategy {name!r}; choose from "
                         + ", ".join(k.value for k in cls))


def mean_one(raw) -> np.ndarray:
    """Rescale to mean 1; an all-zero vector falls back to all-ones."""
    raw = np.asarray(raw, dtype=float)
    total = raw.sum()
    if len(raw) == 0:
        return raw
    if total <= 0:
        return np.ones_like(raw)
    return raw * (len(raw) / total)


@dataclass
class RunningGroupLosses:
    """Exponential moving average of per-group mean loss.

    A group's first observation initializes its average; groups absent from
    a batch keep their previous value.
    """

    num_groups: int
    decay: float = EMA_DECAY
    values: np.ndarray = field(init=False)
    seen: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError("decay must lie in [0, 1)")
        self.values = np.zeros(self.num_groups)
        self.seen = np.zeros(self.num_groups, dtype=bool)

    def update(self, batch_adj: NormalizedAdjacency, losses) -> np.ndarray:
        mass = batch_adj.tdot(np.ones(len(batch_adj)))
        observed = mass > 0
        group_loss = np.zeros(self.num_groups)
        group_loss[observed] = batch_adj.tdot(losses)[observed] / mass[observed]
        fresh = observed & ~self.seen
        old = observed & self.seen
        self.values[fresh] = group_loss[fresh]
        self.values[old] = self.decay * self.values[old] + (1 - self.decay) * group_loss[old]
        self.seen |= observed
        return self.values

    @property
    def initialized(self) -> bool:
        return bool(self.seen.any())


def uni_weights(batch_size: int) -> np.ndarray:
    return np.ones(batch_size)


def dro_weights(batch_adj: NormalizedAdjacency, running: RunningGroupLosses) -> np.ndarray:
    """Keep only samples from the worst-off group (highest running loss).

    Multi-group items get their membership fraction in that group.
    """
    if not running.initialized:
        raise ValueError("running group losses not initialized")
    vals = np.where(running.seen, running.values, -np.inf)
    worst = int(np.argmax(vals))
    onehot = np.zeros(batch_adj.shape[1])
    onehot[worst] = 1.0
    return batch_adj.dot(onehot)


def sdro_weights(batch_adj: NormalizedAdjacency, running: RunningGroupLosses,
                 temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Softmax-tilted group weights, mapped to samples and rescaled to mean 1."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if not running.initialized:
        raise ValueError("running group losses not initialized")
    vals = np.where(running.seen, running.values, running.values[running.seen].min())
    return mean_one(batch_adj.dot(softmax(vals / temperature)))


def prop_weights(predicted) -> np.ndarray:
    """Emphasize samples whose predicted probability is near 0.5."""
    c_hat = np.asarray(predicted, dtype=float)
    return mean_one(1.0 - np.abs(2.0 * c_hat - 1.0))


def group_popularity(adj: NormalizedAdjacency, train_items) -> np.ndarray:
    """Training interactions per group; an item counts fully in each of its groups."""
    counts = np.bincount(np.asarray(train_items, dtype=np.int64), minlength=adj.shape[0])
    membership = adj.toarray() > 0
    return counts.astype(float) @ membership


def reciprocal_group_weights(popularity) -> np.ndarray:
    """``1 / popularity``; zero-popularity groups get the largest observed weight."""
    pop = np.asarray(popularity, dtype=float)
    out = np.zeros_like(pop)
    pos = pop > 0
    out[pos] = 1.0 / pop[pos]
    out[~pos] = out[pos].max() if pos.any() else 1.0
    return out


@dataclass
class IFairLRSWeights:
    """Reciprocal group popularity, fixed once from the training split.

    The scale makes the weights average 1 over all training samples.
    """

    adj: NormalizedAdjacency
    group_weight: np.ndarray
    scale: float

    @classmethod
    def fit(cls, adj: NormalizedAdjacency, train_items) -> "IFairLRSWeights":
        gw = reciprocal_group_weights(group_popularity(adj, train_items))
        raw = adj.rows(train_items).dot(gw)
        scale = len(raw) / raw.sum() if len(raw) and raw.sum() > 0 else 1.0
        return cls(adj, gw, scale)

    def raw(self, items) -> np.ndarray:
        return self.adj.rows(items).dot(self.group_weight)

    def __call__(self, items) -> np.ndarray:
        return self.scale * self.raw(items)


def group_sampling_probs(running: RunningGroupLosses,
                         temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    vals = running.values if running.initialized else np.zeros(running.num_groups)
    return softmax(vals / temperature)


def maxmin_sample(pool_items, adj: NormalizedAdjacency, running: RunningGroupLosses,
                  B: int, rng, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Indices into ``pool_items`` for a batch that oversamples high-loss groups.

    Each draw picks a group from the softmax of running losses, then a pool
    sample uniformly among that group's members (with replacement). Groups
    missing from the pool are dropped and the probabilities renormalized.
    """
    pool_items = np.asarray(pool_items, dtype=np.int64)
    member = adj.rows(pool_items).toarray() > 0
    present = member.any(axis=0)
    if not present.any():
        raise ValueError("empty sampling pool")
    probs = np.where(present, group_sampling_probs(running, temperature), 0.0)
    probs = probs / probs.sum()
    groups = rng.choice(len(probs), size=B, p=probs)
    out = np.empty(B, dtype=np.int64)
    for g in np.unique(groups):
        slots = np.flatnonzero(groups == g)
        out[slots] = rng.choice(np.flatnonzero(member[:, g]), size=len(slots))
    return out


@dataclass
class BaselineWeighter:
    """Stateful wrapper giving every non-dual strategy the same call shape."""

    kind: StrategyKind
    adj: NormalizedAdjacency
    temperature: float = DEFAULT_TEMPERATURE
    running: RunningGroupLosses = field(init=False)
    ifair: Optional[IFairLRSWeights] = None

    def __post_init__(self):
        self.kind = StrategyKind(self.kind)
        if self.kind is StrategyKind.FAIRDUAL:
            raise ValueError("FairDual weights come from the dual state")
        self.running = RunningGroupLosses(self.adj.shape[1])

    @classmethod
    def create(cls, kind, adj: NormalizedAdjacency, train_items=None,
               temperature: float = DEFAULT_TEMPERATURE) -> "BaselineWeighter":
        w = cls(StrategyKind(kind), adj, temperature)
        if w.kind is StrategyKind.IFAIRLRS:
            if train_items is None:
                raise ValueError("IFairLRS needs the training items")
            w.ifair = IFairLRSWeights.fit(adj, train_items)
        return w

    def weights(self, items, losses, predicted) -> np.ndarray:
        """Weights for one batch; running losses are updated first."""
        items = np.asarray(items, dtype=np.int64)
        batch_adj = self.adj.rows(items)
        if len(items):
            self.running.update(batch_adj, losses)
        k = self.kind
        if k in (StrategyKind.UNI, StrategyKind.MAXMIN_SAMPLE):
            return uni_weights(len(items))
        if len(items) == 0:
            return np.zeros(0)
        if k is StrategyKind.DRO:
            return dro_weights(batch_adj, self.running)
        if k is StrategyKind.SDRO:
            return sdro_weights(batch_adj, self.running, self.temperature)
        if k is StrategyKind.PROP:
            return prop_weights(predicted)
        if k is StrategyKind.IFAIRLRS:
            return self.ifair(items)
        raise AssertionError(k)
