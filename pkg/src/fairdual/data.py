"""Interaction logs, chronological splits, shuffled batching and synthetic data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

# 80/10/10 partition, expressed in tenths to keep the arithmetic integral
VAL_TENTHS = 1
TEST_TENTHS = 1


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    label: int
    timestamp: int


class Interactions:
    """Column-oriented block of interactions.

    Iterating yields :class:`Interaction` records; the columns are plain
    int64 arrays so the training loop can index them directly.
    """

    __slots__ = ("users", "items", "labels", "timestamps")

    def __init__(self, users, items, labels, timestamps):
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        n = len(self.users)
        if not (len(self.items) == len(self.labels) == len(self.timestamps) == n):
            raise ValueError("interaction columns have different lengths")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @classmethod
    def from_records(cls, records: Iterable[Sequence[int]]) -> "Interactions":
        rows = np.asarray(list(records), dtype=np.int64).reshape(-1, 4)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])

    @classmethod
    def empty(cls) -> "Interactions":
        return cls([], [], [], [])

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for row in zip(self.users.tolist(), self.items.tolist(),
                       self.labels.tolist(), self.timestamps.tolist()):
            yield Interaction(*row)

    def __getitem__(self, idx) -> "Interactions":
        return Interactions(self.users[idx], self.items[idx],
                            self.labels[idx], self.timestamps[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Interactions):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c))
                   for c in self.__slots__)

    def __repr__(self) -> str:
        return f"Interactions(n={len(self)})"


def as_interactions(log) -> Interactions:
    if isinstance(log, Interactions):
        return log
    return Interactions.from_records(log)


@dataclass
class DatasetSplit:
    train: Interactions
    validation: Interactions
    test: Interactions
    num_users: int
    num_items: int
    # original ids of the dense indices (user_ids[k] is the raw id of user k)
    user_ids: np.ndarray = field(default=None, repr=False)
    item_ids: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.user_ids is None:
            self.user_ids = np.arange(self.num_users)
        if self.item_ids is None:
            self.item_ids = np.arange(self.num_items)

    def positives(self, part: str = "test") -> list[set[int]]:
        """Per-user sets of positive items in one split part."""
        block = getattr(self, part)
        out: list[set[int]] = [set() for _ in range(self.num_users)]
        mask = block.labels == 1
        for u, i in zip(block.users[mask].tolist(), block.items[mask].tolist()):
            out[u].add(i)
        return out


class Batch(NamedTuple):
    interactions: Interactions
    batch_index: int
    epoch_index: int


def split_sizes(n: int) -> tuple[int, int, int]:
    """Train/validation/test sizes for ``n`` interactions.

    Validation and test each take ``floor(n / 10)`` and train keeps the rest,
    so a log shorter than 10 puts everything in train.
    """
    n_val = n * VAL_TENTHS // 10
    n_test = n * TEST_TENTHS // 10
    return n - n_val - n_test, n_val, n_test


def chronological_split(log) -> DatasetSplit:
    """Sort by timestamp (stable) and cut 80/10/10; ids are re-indexed densely."""
    log = as_interactions(log)
    if len(log) == 0:
        raise ValueError("empty dataset")
    order = np.argsort(log.timestamps, kind="stable")
    log = log[order]
    user_ids, users = np.unique(log.users, return_inverse=True)
    item_ids, items = np.unique(log.items, return_inverse=True)
    dense = Interactions(users, items, log.labels, log.timestamps)
    n_train, n_val, _ = split_sizes(len(dense))
    return DatasetSplit(
        train=dense[:n_train],
        validation=dense[n_train:n_train + n_val],
        test=dense[n_train + n_val:],
        num_users=len(user_ids),
        num_items=len(item_ids),
        user_ids=user_ids,
        item_ids=item_ids,
    )


def shuffled_batches(split: DatasetSplit, B: int, seed: int,
                     epoch_index: int = 0) -> Iterator[Batch]:
    """Yield one epoch of batches drawn without replacement from ``split.train``."""
    if B <= 0:
        raise ValueError(f"batch size must be positive, got {B}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(split.train))
    for j, start in enumerate(range(0, len(perm), B)):
        yield Batch(split.train[perm[start:start + B]], j, epoch_index)


def read_interactions(path) -> Interactions:
    """Read ``user_id, item_id, label, timestamp`` rows (comma or tab separated)."""
    rows = []
    for fields in _read_rows(path):
        if len(fields) != 4:
            raise ValueError(f"{path}: expected 4 fields, got {len(fields)}: {fields}")
        rows.append([int(f) for f in fields])
    return Interactions.from_records(rows)


def read_group_pairs(path) -> list[tuple[int, int]]:
    """Read ``item_id, group_id`` membership rows."""
    pairs = []
    for fields in _read_rows(path):
        if len(fields) != 2:
            raise ValueError(f"{path}: expected 2 fields, got {len(fields)}: {fields}")
        pairs.append((int(fields[0]), int(fields[1])))
    return pairs


def write_interactions(path, log: Interactions) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# user_id,item_id,label,timestamp\n")
        w = csv.writer(fh)
        for row in log:
            w.writerow(row)


def _read_rows(path) -> Iterator[list[str]]:
    text = Path(path).read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sep = "\t" if "\t" in line else ","
        yield [f.strip() for f in line.split(sep)]


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 1000
    num_items: int = 1000
    num_groups: int = 7
    rank: int = 8
    noise_std: float = 0.5
    group_size_skew: float = 0.0
    seed: int = 0
    # positives per user are the top ``positives_per_user`` true scores
    positives_per_user: int = 20
    negatives_per_positive: int = 1
    # spread of per-group popularity offsets added to the true logits
    group_bias_std: float = 1.0
    positive_factors: bool = False

    def validate(self) -> None:
        if self.num_groups < 1 or self.num_groups > self.num_items:
            raise ValueError("need 1 <= num_groups <= num_items")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.noise_std < 0 or self.group_size_skew < 0:
            raise ValueError("noise_std and group_size_skew must be >= 0")
        if not 1 <= self.positives_per_user <= self.num_items:
            raise ValueError("positives_per_user out of range")


def zipf_group_sizes(num_items: int, num_groups: int, skew: float) -> np.ndarray:
    """Partition ``num_items`` into group sizes proportional to ``1 / rank**skew``.

    Rounding uses largest remainders; every group keeps at least one item.
    """
    raw = 1.0 / np.arange(1, num_groups + 1) ** skew
    quota = raw / raw.sum() * (num_items - num_groups)
    sizes = np.floor(quota).astype(np.int64)
    short = (num_items - num_groups) - sizes.sum()
    sizes[np.argsort(-(quota - sizes), kind="stable")[:short]] += 1
    return sizes + 1


def top_k_labels(true_scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 matrix marking each row's ``k`` largest entries (ties by lower index)."""
    order = np.argsort(-true_scores, axis=1, kind="stable")[:, :k]
    labels = np.zeros(true_scores.shape, dtype=np.int64)
    np.put_along_axis(labels, order, 1, axis=1)
    return labels


def generate_synthetic(spec: SyntheticSpec):
    """Planted low-rank preferences with a known ground truth.

    Returns ``(split, catalog, true_scores)`` where
    ``true_scores = sigmoid(U V^T + group offset + noise)``.
    """
    from .groups import GroupCatalog

    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nu, ni, G = spec.num_users, spec.num_items, spec.num_groups

    sizes = zipf_group_sizes(ni, G, spec.group_size_skew)
    item_group = rng.permutation(np.repeat(np.arange(G), sizes))

    scale = 1.0 / np.sqrt(spec.rank)
    U = rng.normal(size=(nu, spec.rank))
    V = rng.normal(size=(ni, spec.rank))
    if spec.positive_factors:
        U, V = np.abs(U), np.abs(V)
    group_offset = rng.normal(scale=spec.group_bias_std, size=G)
    logits = scale * U @ V.T + group_offset[item_group][None, :]
    if spec.noise_std > 0:
        logits = logits + rng.normal(scale=spec.noise_std, size=logits.shape)
    true_scores = expit(logits)

    labels = top_k_labels(true_scores, spec.positives_per_user)
    users, items, lab = [], [], []
    for u in range(nu):
        pos = np.flatnonzero(labels[u])
        neg_pool = np.flatnonzero(labels[u] == 0)
        n_neg = min(len(neg_pool), spec.negatives_per_positive * len(pos))
        neg = rng.choice(neg_pool, size=n_neg, replace=False)
        users.append(np.full(len(pos) + n_neg, u))
        items.append(np.concatenate([pos, neg]))
        lab.append(np.concatenate([np.ones(len(pos)), np.zeros(n_neg)]))
    users = np.concatenate(users)
    items = np.concatenate(items)
    lab = np.concatenate(lab)
    timestamps = rng.permutation(len(users))
    log = Interactions(users, items, lab, timestamps)

    order = np.argsort(timestamps, kind="stable")
    log = log[order]
    n_train, n_val, _ = split_sizes(len(log))
    split = DatasetSplit(log[:n_train], log[n_train:n_train + n_val],
                         log[n_train + n_val:], nu, ni)
    catalog = GroupCatalog.from_pairs(zip(range(ni), item_group.tolist()),
                                      num_items=ni, num_groups=G)
    return split, catalog, true_scores
