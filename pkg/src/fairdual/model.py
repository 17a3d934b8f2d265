"""Matrix-factorization backbone with a frozen item-embedding snapshot."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

EPS = 1e-7
_MAGIC = b"FDMF"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class EmbeddingModel:
    user_table: np.ndarray
    item_table: np.ndarray
    frozen_item_table: np.ndarray
    learning_rate: float = 0.05
    beta: int = 640
    symmetric_loss: bool = False
    eps: float = EPS
    clamp_events: int = field(default=0, repr=False)

    @property
    def d(self) -> int:
        return self.user_table.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_table.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.user_table.copy(), self.item_table.copy(),
                              self.frozen_item_table.copy(), self.learning_rate,
                              self.beta, self.symmetric_loss, self.eps)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for t in (self.user_table, self.item_table, self.frozen_item_table):
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()


def init_model(num_users: int, num_items: int, d: int, rng, scale: float = 0.1,
               learning_rate: float = 0.05, beta: int = 640,
               symmetric_loss: bool = False) -> EmbeddingModel:
    users = rng.normal(scale=scale, size=(num_users, d))
    items = rng.normal(scale=scale, size=(num_items, d))
    return EmbeddingModel(users, items, items.copy(), learning_rate, beta, symmetric_loss)


def _clamped(model: EmbeddingModel, p: np.ndarray) -> np.ndarray:
    lo, hi = model.eps, 1.0 - model.eps
    hit = int(np.count_nonzero((p < lo) | (p > hi)))
    if hit:
        model.clamp_events += hit
        log.warning("probability clamping active on %d predictions", hit)
    return np.clip(p, lo, hi)


def predict(model: EmbeddingModel, user_id, item_id):
    """``sigmoid(e_u . e_i)`` clamped to ``[eps, 1 - eps]``; vectorized over ids."""
    users = np.asarray(user_id)
    items = np.asarray(item_id)
    logits = np.einsum("...d,...d->...", model.user_table[users], model.item_table[items])
    p = np.clip(expit(logits), model.eps, 1.0 - model.eps)
    return float(p) if p.ndim == 0 else p


def _forward(model, users, items, labels):
    logits = np.einsum("bd,bd->b", model.user_table[users], model.item_table[items])
    p = _clamped(model, expit(logits))
    c = np.asarray(labels, dtype=float)
    losses = -c * np.log(p)
    if model.symmetric_loss:
        losses = losses - (1.0 - c) * np.log1p(-p)
    return logits, p, c, losses


def forward(model: EmbeddingModel, users, items, labels):
    """Clamped probabilities and per-sample losses ``(p, l)`` for one batch."""
    _, p, _, losses = _forward(model, np.asarray(users), np.asarray(items), labels)
    return p, losses


def batch_loss(model: EmbeddingModel, users, items, labels, weights):
    """Weighted log-loss of one batch: returns ``(s^T l, l)``."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(users),):
        raise ValueError("one weight per sample required")
    _, _, _, losses = _forward(model, users, items, labels)
    return float(weights @ losses), losses


def gradients(model: EmbeddingModel, users, items, labels, weights):
    """Per-sample gradients of ``s^T l`` w.r.t. the touched user/item rows.

    Weights are constants. Where clamping is active the derivative is 0.
    """
    users = np.asarray(users)
    items = np.asarray(items)
    logits, p, c, losses = _forward(model, users, items, labels)
    raw = expit(logits)
    inside = (raw >= model.eps) & (raw <= 1.0 - model.eps)
    # d(-c log s(x))/dx = -c (1 - s); d(-(1-c) log(1 - s(x)))/dx = (1 - c) s
    dldx = -c * (1.0 - p)
    if model.symmetric_loss:
        dldx = dldx + (1.0 - c) * p
    dldx = np.asarray(weights, dtype=float) * dldx * inside
    grad_u = dldx[:, None] * model.item_table[items]
    grad_i = dldx[:, None] * model.user_table[users]
    return grad_u, grad_i, losses


def sgd_step(model: EmbeddingModel, users, items, labels, weights) -> np.ndarray:
    """One plain SGD step on ``s^T l``; returns the per-sample losses (pre-step)."""
    grad_u, grad_i, losses = gradients(model, users, items, labels, weights)
    if not (np.isfinite(grad_u).all() and np.isfinite(grad_i).all()):
        raise NonFiniteGradientError("non-finite gradient in SGD step")
    lr = model.learning_rate
    np.add.at(model.user_table, users, -lr * grad_u)
    np.add.at(model.item_table, items, -lr * grad_i)
    return losses


def maybe_refresh_snapshot(model: EmbeddingModel, counter: int, beta: int) -> bool:
    if beta < 1:
        raise ValueError("beta must be >= 1")
    if counter % beta == 0:
        model.frozen_item_table = model.item_table.copy()
        return True
    return False


def score_matrix(model: EmbeddingModel, users, use_frozen: bool = False) -> np.ndarray:
    table = model.frozen_item_table if use_frozen else model.item_table
    return model.user_table[np.asarray(users)] @ table.T


def top_k(scores: np.ndarray, K: int) -> np.ndarray:
    """Row-wise indices of the ``K`` largest scores, ties to the lower index."""
    scores = np.atleast_2d(scores)
    if K > scores.shape[1]:
        raise ValueError(f"K={K} exceeds number of items {scores.shape[1]}")
    return np.argsort(-scores, axis=1, kind="stable")[:, :K]


def rank_items(model: EmbeddingModel, user_id: int, K: int, use_frozen: bool = False,
               exclude=None) -> np.ndarray:
    """Top-``K`` items for one user, by predicted score, ties by ascending id.

    The logistic is monotone so ranking uses the raw dot product, which also
    avoids artificial ties at the clamp bounds. ``exclude`` items are pushed
    to the bottom.
    """
    scores = score_matrix(model, [user_id], use_frozen)[0]
    if exclude:
        scores = scores.copy()
        scores[list(exclude)] = -np.inf
    return top_k(scores, K)[0]


def save_checkpoint(model: EmbeddingModel, path, extra: dict | None = None) -> None:
    """Binary tables (little-endian float64) plus a JSON sidecar of hyperparameters."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, model.num_users, model.num_items, model.d))
        for t in (model.user_table, model.item_table, model.frozen_item_table):
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    meta = {"learning_rate": model.learning_rate, "beta": model.beta,
            "symmetric_loss": model.symmetric_loss, "eps": model.eps,
            "num_users": model.num_users, "num_items": model.num_items, "d": model.d}
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> EmbeddingModel:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, nu, ni, d = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a model checkpoint")
    expected = _HEADER.size + 8 * d * (nu + 2 * ni)
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header ({expected})")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    users = flat[: nu * d].reshape(nu, d)
    items = flat[nu * d: (nu + ni) * d].reshape(ni, d)
    frozen = flat[(nu + ni) * d:].reshape(ni, d)
    meta = {}
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
    return EmbeddingModel(users.copy(), items.copy(), frozen.copy(),
                          meta.get("learning_rate", 0.05), meta.get("beta", 640),
                          meta.get("symmetric_loss", False), meta.get("eps", EPS))
