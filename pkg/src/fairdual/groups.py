"""Item-group memberships and the row-normalized item x group adjacency."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import sparse

# below this many groups the adjacency is stored densely
DENSE_MAX_GROUPS = 64


@dataclass
class GroupCatalog:
    num_groups: int
    memberships: list[frozenset]
    m: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]], num_items: Optional[int] = None,
                   num_groups: Optional[int] = None, m=None,
                   item_ids: Optional[np.ndarray] = None) -> "GroupCatalog":
        """Build a catalog from ``(item_id, group_id)`` pairs.

        If ``item_ids`` is given (raw ids of a re-indexed split), pairs are
        mapped onto dense item indices and pairs for unknown items dropped.
        ``m`` defaults to the group sizes ``|I_g|``.
        """
        pairs = list(pairs)
        if item_ids is not None:
            lookup = {int(raw): k for k, raw in enumerate(np.asarray(item_ids).tolist())}
            pairs = [(lookup[i], g) for i, g in pairs if i in lookup]
            num_items = len(lookup) if num_items is None else num_items
        if num_items is None:
            num_items = 1 + max((i for i, _ in pairs), default=-1)
        if num_groups is None:
            num_groups = 1 + max((g for _, g in pairs), default=-1)
        sets: list[set] = [set() for _ in range(num_items)]
        for i, g in pairs:
            if not 0 <= g < num_groups:
                raise ValueError(f"group id {g} out of range")
            sets[i].add(g)
        memberships = [frozenset(s) for s in sets]
        if m is None:
            m = group_sizes(memberships, num_groups)
        return cls(num_groups, memberships, np.asarray(m, dtype=float))

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        if self.m.shape != (self.num_groups,):
            raise ValueError("m must have one weight per group")
        if not np.all(self.m > 0):
            raise ValueError("group weights m must be positive (empty group?)")

    @property
    def num_items(self) -> int:
        return len(self.memberships)

    @property
    def n_i(self) -> np.ndarray:
        return np.array([len(s) for s in self.memberships], dtype=np.int64)

    def with_m(self, m) -> "GroupCatalog":
        return GroupCatalog(self.num_groups, self.memberships, np.asarray(m, dtype=float))


def group_sizes(memberships, num_groups: int) -> np.ndarray:
    sizes = np.zeros(num_groups)
    for s in memberships:
        for g in s:
            sizes[g] += 1
    return sizes


class NormalizedAdjacency:
    """Row-stochastic ``rows x |G|`` matrix with entries ``1 / n_i``.

    Wraps either a dense array or a CSR matrix; callers only use the
    products below and row slicing.
    """

    def __init__(self, matrix):
        self.matrix = matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.matrix)

    def __len__(self) -> int:
        return self.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else np.array(self.matrix)

    def dot(self, v) -> np.ndarray:
        """``A_hat @ v`` for a group vector ``v`` (one value per row)."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.shape[1]:
            raise ValueError(f"expected vector of length {self.shape[1]}, got {v.shape}")
        return np.asarray(self.matrix @ v)

    def tdot(self, w) -> np.ndarray:
        """``A_hat^T @ w``: aggregate a per-row vector into groups."""
        w = np.asarray(w, dtype=float)
        if w.shape[0] != self.shape[0]:
            raise ValueError(f"expected vector of length {self.shape[0]}, got {w.shape}")
        return np.asarray(self.matrix.T @ w)

    def rows(self, item_ids) -> "NormalizedAdjacency":
        return batch_slice(self, item_ids)


def build_adjacency(catalog: GroupCatalog, dense: Optional[bool] = None) -> NormalizedAdjacency:
    n_i = catalog.n_i
    orphans = np.flatnonzero(n_i == 0)
    if len(orphans):
        raise ValueError(f"orphan item(s) without a group: {orphans[:10].tolist()}")
    rows = np.repeat(np.arange(catalog.num_items), n_i)
    cols = np.fromiter((g for s in catalog.memberships for g in sorted(s)),
                       dtype=np.int64, count=int(n_i.sum()))
    vals = 1.0 / n_i[rows]
    shape = (catalog.num_items, catalog.num_groups)
    if dense is None:
        dense = catalog.num_groups <= DENSE_MAX_GROUPS
    if dense:
        mat = np.zeros(shape)
        mat[rows, cols] = vals
    else:
        mat = sparse.csr_matrix((vals, (rows, cols)), shape=shape)
    return NormalizedAdjacency(mat)


def batch_slice(adj: NormalizedAdjacency, item_ids) -> NormalizedAdjacency:
    """Row ``b`` of the result is row ``item_ids[b]`` of ``adj`` (duplicates kept)."""
    idx = np.asarray(item_ids, dtype=np.int64).reshape(-1)
    if len(idx) and (idx.min() < 0 or idx.max() >= adj.shape[0]):
        raise IndexError("item id out of range for adjacency")
    return NormalizedAdjacency(adj.matrix[idx])
