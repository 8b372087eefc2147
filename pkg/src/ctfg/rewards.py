"""Batch-level tri-objective reward: class discrimination, cross-user
invariance and temporal fidelity.

All reward terms act on detached arrays.  ``Z`` is a batch of feature
sequences (N, s, k); ``H`` holds the matching encoder states (N, l, D).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import diffcore as dc


@dataclass
class RewardWeights:
    w_cls: float = 3.0
    w_inv: float = 2.0
    w_tmp: float = 1.0

    def __post_init__(self):
        ws = (self.w_cls, self.w_inv, self.w_tmp)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("reward weights must be non-negative with at least one positive")


@dataclass
class RewardBreakdown:
    r_cls: float
    r_inv: float
    r_tmp: float
    total: float
    weights: RewardWeights
    scatter: dict[int, float] = field(default_factory=dict)  # V_c
    user_gap: dict[int, float] = field(default_factory=dict)  # D_c


def _sqdist(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.sum(d * d))


def reward_cls(Z: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared Frobenius distance over ordered pairs of class centroids."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    C = len(classes)
    if C < 2:
        raise ValueError("reward_cls needs at least two classes in the batch")
    cent = np.stack([Z[labels == c].mean(axis=0) for c in classes]).reshape(C, -1)
    diff = cent[:, None, :] - cent[None, :, :]
    return float(np.sum(diff * diff) / (C * (C - 1)))


def reward_inv(Z: np.ndarray, labels: np.ndarray, users: np.ndarray):
    """Negative sum over classes of intra-user scatter plus inter-user centroid gap.

    Returns (reward, V_c by class, D_c by class).
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels, users = np.asarray(labels), np.asarray(users)
    scatter, gap = {}, {}
    for c in np.unique(labels).tolist():
        in_c = labels == c
        cents, vs = [], []
        for u in np.unique(users[in_c]).tolist():
            block = Z[in_c & (users == u)]
            cent = block.mean(axis=0)
            cents.append(cent)
            vs.append(float(np.mean(np.sum((block - cent) ** 2, axis=(1, 2)))))
        scatter[c] = float(np.mean(vs))
        pairs = list(combinations(range(len(cents)), 2))
        gap[c] = float(np.mean([_sqdist(cents[a], cents[b]) for a, b in pairs])) if pairs else 0.0
    total = -sum(scatter[c] + gap[c] for c in scatter)
    return total, scatter, gap


def reward_tmp(Z: np.ndarray, H: np.ndarray, proj: np.ndarray) -> float:
    """-(1/N) sum_i ||mean_j z_ij @ W_proj - mean_t h_it||^2."""
    zbar = np.asarray(Z, dtype=np.float64).mean(axis=1)
    hbar = np.asarray(H, dtype=np.float64).mean(axis=1)
    resid = zbar @ proj - hbar
    return -float(np.mean(np.sum(resid * resid, axis=1)))


def reward_total(r_cls: float, r_inv: float, r_tmp: float, weights: RewardWeights,
                 scatter=None, user_gap=None) -> RewardBreakdown:
    total = weights.w_cls * r_cls + weights.w_inv * r_inv + weights.w_tmp * r_tmp
    return RewardBreakdown(r_cls, r_inv, r_tmp, total, weights, dict(scatter or {}), dict(user_gap or {}))


def batch_reward(Z, labels, users, hbar_or_H, proj, weights: RewardWeights) -> RewardBreakdown:
    """All three components and their weighted total for one batch.

    ``hbar_or_H`` may be full encoder states (N, l, D) or their temporal means (N, D).
    """
    H = np.asarray(hbar_or_H)
    if H.ndim == 2:
        H = H[:, None, :]
    rc = reward_cls(Z, labels)
    ri, v, d = reward_inv(Z, labels, users)
    rt = reward_tmp(Z, H, proj)
    return reward_total(rc, ri, rt, weights, v, d)


class TmpProjection:
    """Learnable W_proj (k, D) fitted by least squares with Adam."""

    def __init__(self, k: int, d_model: int, rng: np.random.Generator | None = None,
                 lr: float = 1e-3):
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = dc.parameter(rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, d_model)), "proj.w")
        self.opt = dc.adam_init({"proj.w": self.weight}, lr=lr)

    @property
    def W(self) -> np.ndarray:
        return self.weight.data

    def loss(self, zbar: np.ndarray, hbar: np.ndarray) -> dc.Tensor:
        resid = dc.tensor(zbar) @ self.weight - hbar
        return dc.mean(dc.sum(resid * resid, axis=1))

    def gradient(self, Z: np.ndarray, H: np.ndarray) -> np.ndarray:
        zbar, hbar = _summaries(Z, H)
        return dc.backward(self.loss(zbar, hbar), {"proj.w": self.weight})["proj.w"]


def _summaries(Z, H):
    zbar = np.asarray(Z, dtype=np.float64).mean(axis=1)
    H = np.asarray(H, dtype=np.float64)
    hbar = H.mean(axis=1) if H.ndim == 3 else H
    return zbar, hbar


def fit_projection_step(Z: np.ndarray, H: np.ndarray, proj: TmpProjection) -> float:
    """One Adam step on W_proj against the reconstruction error; returns the pre-step loss."""
    zbar, hbar = _summaries(Z, H)
    loss = proj.loss(zbar, hbar)
    grads = dc.backward(loss, {"proj.w": proj.weight})
    dc.adam_step({"proj.w": proj.weight}, grads, proj.opt)
    return float(loss.data)
