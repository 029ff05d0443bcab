"""Log-logistic loss, gradient and Hessian for offset logistic regression.

Labels are in {0, 1}.  For an instance with offset ``zeta`` and features
``z`` the linear score is ``s = zeta + z @ beta`` and the loss is
``log(1 + exp(s)) - y * s``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .model import DimensionMismatchError, SparseVector, zero_hessian

SCORE_CLAMP = 700.0
_CHUNK = 512


@dataclass(frozen=True)
class OffsetInstance:
    offset: float
    features: SparseVector
    label: int

    def __post_init__(self):
        if not np.isfinite(self.offset):
            raise ValueError("offset must be finite")


@dataclass(frozen=True)
class DenseBatch:
    """Array form of a list of offset instances: ``Z`` (n, d), offsets, labels."""

    Z: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.Z.shape[1])

    def __len__(self) -> int:
        return int(self.Z.shape[0])


def as_dense(batch, dim: int) -> DenseBatch:
    if isinstance(batch, DenseBatch):
        if batch.dim != dim:
            raise ValueError(f"batch dimension {batch.dim} != {dim}")
        return batch
    n = len(batch)
    Z = np.zeros((n, dim))
    offsets = np.empty(n)
    labels = np.empty(n)
    for i, inst in enumerate(batch):
        f = inst.features
        if len(f):
            if f.indices[-1] >= dim:
                raise DimensionMismatchError(
                    f"feature index {int(f.indices[-1])} out of range for dimension {dim}")
            Z[i, f.indices] = f.values
        offsets[i] = inst.offset
        labels[i] = inst.label
    return DenseBatch(Z, offsets, labels)


def sigmoid(s):
    """Logistic function; the argument is clamped to [-700, 700]."""
    return expit(np.clip(s, -SCORE_CLAMP, SCORE_CLAMP))


def _scores(b: DenseBatch, beta) -> np.ndarray:
    return np.clip(b.offsets + b.Z @ beta, -SCORE_CLAMP, SCORE_CLAMP)


def logloss(batch: Sequence[OffsetInstance] | DenseBatch, beta) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    b = as_dense(batch, beta.shape[0])
    if not len(b):
        return 0.0
    s = _scores(b, beta)
    return float(np.sum(np.logaddexp(0.0, s) - b.labels * s))


def grad(batch, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    b = as_dense(batch, beta.shape[0])
    if not len(b):
        return np.zeros_like(beta)
    r = expit(_scores(b, beta)) - b.labels
    return b.Z.T @ r


def curvature_weights(b: DenseBatch, beta) -> np.ndarray:
    p = expit(_scores(b, beta))
    return p * (1.0 - p)


def weighted_gram(Z: np.ndarray, w: np.ndarray, mode: str) -> np.ndarray:
    """``sum_n w_n z_n z_n^T`` (full) or its diagonal, summed row by row.

    Both modes accumulate the same products in the same order, so the
    diagonal store is bitwise the diagonal of the full store.
    """
    d = Z.shape[1]
    out = zero_hessian(d, mode)
    for start in range(0, Z.shape[0], _CHUNK):
        Zc = Z[start:start + _CHUNK]
        wc = w[start:start + _CHUNK]
        # w * (z_i * z_j) keeps every term, and so the sum, exactly symmetric
        if mode == "full":
            part = (wc[:, None, None] * (Zc[:, :, None] * Zc[:, None, :])).sum(axis=0)
        else:
            part = (wc[:, None] * (Zc * Zc)).sum(axis=0)
        out = part if start == 0 else out + part
    return out


def hessian_contrib(batch, beta, mode: str = "full") -> np.ndarray:
    """Data curvature of a batch at ``beta``: ``sum_n s(1-s) z_n z_n^T``."""
    beta = np.asarray(beta, dtype=np.float64)
    b = as_dense(batch, beta.shape[0])
    if not len(b):
        return zero_hessian(beta.shape[0], mode)
    return weighted_gram(b.Z, curvature_weights(b, beta), mode)
