"""Dual mirror-gradient machinery for max-min fair reweighting.

The dual variable ``mu`` lives in

    M = { mu : sum_{g in S} mu_g m_g >= -lambda  for every subset S }.

The subset achieving the smallest sum is exactly the set of negative terms,
so membership reduces to the single concave constraint

    sum_g min(mu_g m_g, 0) >= -lambda,

which is what :func:`feasible` and :func:`project_dual` work with.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .groups import NormalizedAdjacency

DEFAULT_ALPHA = 0.9
FEAS_TOL = 1e-8


class ProjectionError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass
class DualState:
    mu: np.ndarray
    momentum: np.ndarray
    gamma: np.ndarray
    eta: float
    lam: float
    alpha: float
    m: np.ndarray
    step: int = 0

    def reset(self) -> None:
        """Zero ``mu`` and the momentum (freeze-refresh boundary)."""
        self.mu = np.zeros_like(self.m)
        self.momentum = np.zeros_like(self.m)

    def reset_reward(self) -> None:
        self.gamma = self.m.copy()

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "momentum": self.momentum.tolist(),
            "gamma": self.gamma.tolist(),
            "step": self.step,
            "eta": self.eta,
            "lambda": self.lam,
            "alpha": self.alpha,
            "m": self.m.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "DualState":
        arr = lambda k: np.asarray(d[k], dtype=float)
        return cls(mu=arr("mu"), momentum=arr("momentum"), gamma=arr("gamma"),
                   eta=float(d["eta"]), lam=float(d["lambda"]), alpha=float(d["alpha"]),
                   m=arr("m"), step=int(d["step"]))

    @classmethod
    def from_json(cls, text: str) -> "DualState":
        return cls.from_dict(json.loads(text))


def init_dual(m, eta: float, lam: float, alpha: float = DEFAULT_ALPHA) -> DualState:
    m = np.asarray(m, dtype=float)
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if not lam >= 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if m.ndim != 1 or not np.all(m > 0):
        raise ValueError("group weights m must be a positive vector")
    zeros = np.zeros_like(m)
    return DualState(mu=zeros.copy(), momentum=zeros.copy(), gamma=m.copy(),
                     eta=float(eta), lam=float(lam), alpha=float(alpha), m=m.copy())


def estimate_scores(user_embeddings, frozen_item_sample, K: int) -> np.ndarray:
    """Per-user sum of the ``K`` largest logistic scores against sampled items.

    Each item score lies in (0, 1), so the estimate is bounded by ``K``.
    """
    E = np.asarray(frozen_item_sample, dtype=float)
    U = np.atleast_2d(np.asarray(user_embeddings, dtype=float))
    Q = E.shape[0]
    if K > Q:
        raise ValueError(f"sample too small for ranking size (K={K} > Q={Q})")
    if K <= 0:
        return np.zeros(U.shape[0])
    scores = expit(U @ E.T)
    top = np.partition(scores, Q - K, axis=1)[:, Q - K:]
    return top.sum(axis=1)


def subgradient(batch_adj: NormalizedAdjacency, w_tilde, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (batch_adj.shape[1],):
        raise ValueError("gamma length does not match the number of groups")
    return gamma - batch_adj.tdot(w_tilde)


def momentum_update(state: DualState, g_tilde) -> np.ndarray:
    g = state.alpha * np.asarray(g_tilde, dtype=float) + (1.0 - state.alpha) * state.momentum
    state.momentum = g
    return g


def update_reward(state: DualState, batch_adj: NormalizedAdjacency, w_tilde) -> np.ndarray:
    # no clamping at zero: the remaining reward may go negative
    state.gamma = state.gamma - batch_adj.tdot(w_tilde)
    return state.gamma


def negative_part_sum(mu, m) -> float:
    return float(np.minimum(np.asarray(mu) * np.asarray(m), 0.0).sum())


def feasible(mu, m, lam: float, tol: float = 0.0) -> bool:
    return negative_part_sum(mu, m) >= -lam - tol


def dual_objective(x, g, mu_prev, eta: float) -> float:
    """``g^T x + eta * ||x - mu_prev||^2``, the quantity :func:`project_dual` minimizes."""
    x = np.asarray(x, dtype=float)
    return float(np.dot(g, x) + eta * np.sum((x - mu_prev) ** 2))


def project_dual(state: DualState, g_momentum, max_iter: int = 200,
                 tol: float = 1e-10) -> np.ndarray:
    """Mirror step ``argmin_{x in M} g^T x + eta ||x - mu||^2``; stores the result.

    The objective equals ``eta ||x - x0||^2`` up to a constant with
    ``x0 = mu - g / (2 eta)``. When ``x0`` is infeasible the constraint is
    active; for a multiplier ``theta`` the stationarity conditions give, per
    coordinate, ``x = x0`` where ``x0 >= 0`` and
    ``x = min(x0 + theta m / (2 eta), 0)`` elsewhere. The constraint value is
    non-decreasing in ``theta``, so ``theta`` is found by bisection, keeping the
    upper end (always feasible).
    """
    g = np.asarray(g_momentum, dtype=float)
    m, lam, eta = state.m, state.lam, state.eta
    x0 = state.mu - g / (2.0 * eta)
    if feasible(x0, m, lam):
        state.mu = x0
        state.step += 1
        return x0

    neg = x0 < 0
    # multiplier at which each negative coordinate reaches 0
    breaks = -x0[neg] * 2.0 * eta / m[neg]

    def x_of(theta: float) -> np.ndarray:
        x = x0.copy()
        moved = np.minimum(x0[neg] + theta * m[neg] / (2.0 * eta), 0.0)
        # exact zero past the breakpoint; rounding must not leave -1e-9 behind
        x[neg] = np.where(theta >= breaks, 0.0, moved)
        return x

    # at theta_hi every negative coordinate is exactly 0, which is feasible
    lo, hi = 0.0, float(np.max(breaks))
    residual = negative_part_sum(x_of(hi), m) + lam
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = negative_part_sum(x_of(mid), m) + lam
        if r >= 0:
            hi, residual = mid, r
        else:
            lo = mid
        if residual <= tol or hi - lo <= 1e-15 * max(1.0, hi):
            break
    else:
        raise ProjectionError("dual projection did not converge", residual)
    x = _polish(x0, neg, m, lam, eta, hi, x_of)
    if not feasible(x, m, lam, FEAS_TOL):
        raise ProjectionError("dual projection left the feasible set",
                              negative_part_sum(x, m) + lam)
    state.mu = x
    state.step += 1
    return x


def _polish(x0, neg, m, lam, eta, theta, x_of):
    """Solve the residual exactly on the linear piece containing ``theta``.

    Falls back to the bisection point if the solution leaves that piece or
    the feasible set.
    """
    x = x_of(theta)
    free = neg & (x < 0)
    slope = np.sum(m[free] ** 2) / (2.0 * eta)
    if slope <= 0:
        return x
    theta_exact = (-lam - np.sum(m[free] * x0[free])) / slope
    y = x_of(theta_exact)
    if np.array_equal(neg & (y < 0), free) and feasible(y, m, lam, FEAS_TOL):
        return y
    return x


def sample_weights(batch_adj: NormalizedAdjacency, mu) -> np.ndarray:
    return 1.0 - batch_adj.dot(mu)


def dual_regularizer(mu, m, lam: float) -> float:
    """Closed form ``m^T mu / lambda + 1`` of the regularizer conjugate.

    Only meaningful for feasible ``mu``; outside ``M`` the underlying
    maximization is unbounded.
    """
    if lam == 0:
        raise ValueError("regularizer undefined for lambda = 0")
    return float(np.dot(m, mu) / lam + 1.0)
