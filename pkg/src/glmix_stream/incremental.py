"""Incremental update of a random effect from one mini-batch.

The discounted loss on all past batches is replaced by a quadratic centered
at the previous posterior mean.  After solving on the new batch the stored
data curvature is discounted and the new batch's curvature is added:

    H_t = delta * H_{t-1} + sum_n s_n (1 - s_n) z_n z_n^T

The posterior covariance served for exploration is ``(H_t + lam*I)^{-1}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .loss import as_dense, hessian_contrib
from .model import CoefficientState, TrainerConfig
from .solver import objective_value, per_entity_solve


class CovarianceError(np.linalg.LinAlgError):
    """``H + lam*I`` is not numerically positive definite."""


@dataclass(frozen=True)
class IncrementalUpdateResult:
    state: CoefficientState
    batch_loss_before: float
    batch_loss_after: float

    @property
    def new_mean(self) -> np.ndarray:
        return self.state.mean

    @property
    def new_H(self) -> np.ndarray:
        return self.state.hessian

    def posterior_cov(self) -> np.ndarray:
        return posterior_covariance(self.state)


def anchor_terms(state: CoefficientState, config: TrainerConfig):
    """Quadratic anchor curvature, anchor weight and base L2 weight for a step.

    Returns ``(P, w, lam_base)`` such that the step objective is
    ``(w/2)||b - mean||_P^2 + f_t(b) + (lam_base/2)||b||^2``.
    """
    delta, lam = config.delta, state.lam
    if config.prior_form == "plain":
        return state.hessian, delta, lam
    H = state.hessian
    P = H + lam * np.eye(state.dim) if H.ndim == 2 else H + lam
    return P, delta, (1.0 - delta) * lam


def incremental_update(state: CoefficientState, batch, config: TrainerConfig,
                       ts: int | None = None) -> IncrementalUpdateResult:
    """Apply one mini-batch to a random-effect posterior.

    Parameters
    ----------
    state : CoefficientState
        Posterior after the previous batch (or the prior for a new entity).
    batch : list of OffsetInstance or DenseBatch
        New observations of this entity, offsets already computed.  May be
        empty, in which case the curvature is discounted and the mean is
        re-solved on the data-free objective.
    config : TrainerConfig
    ts : int, optional
        Timestamp recorded as ``last_update_ts``.

    Returns
    -------
    IncrementalUpdateResult
    """
    if state.hessian_mode != config.hessian_mode:
        state = _convert_mode(state, config.hessian_mode)
    b = as_dense(batch, state.dim)
    P, w, lam_base = anchor_terms(state, config)
    before = objective_value(b, state.mean, state.mean, P, w, lam_base)
    mean, contrib = per_entity_solve(b, state.mean, P, w, lam_base, config, start=state.mean)
    after = objective_value(b, mean, state.mean, P, w, lam_base)
    new_H = config.delta * state.hessian + contrib
    new_state = CoefficientState(mean, new_H, state.lam, state.version + 1,
                                 state.last_update_ts if ts is None else int(ts))
    return IncrementalUpdateResult(new_state, before, after)


def _convert_mode(state: CoefficientState, mode: str) -> CoefficientState:
    if mode == "diagonal":
        H = np.diag(state.hessian).copy()
    else:
        H = np.diag(state.hessian)
    return CoefficientState(state.mean, H, state.lam, state.version, state.last_update_ts)


def posterior_covariance(state: CoefficientState) -> np.ndarray:
    """``(H + lam*I)^{-1}``: a (d, d) matrix, or a length-d vector in diagonal mode."""
    if state.hessian.ndim == 1:
        prec = state.hessian + state.lam
        if np.any(prec <= 0):
            raise CovarianceError(f"non-positive precision entries: min {prec.min():.3e}")
        return 1.0 / prec
    A = state.hessian + state.lam * np.eye(state.dim)
    try:
        c = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        eig = np.linalg.eigvalsh(0.5 * (A + A.T))
        raise CovarianceError(
            f"H + lam*I not positive definite: eigenvalues in [{eig[0]:.3e}, {eig[-1]:.3e}], "
            f"condition {abs(eig[-1] / eig[0]) if eig[0] else float('inf'):.3e}") from exc
    cov = linalg.cho_solve(c, np.eye(state.dim))
    return 0.5 * (cov + cov.T)


@dataclass
class ChainReport:
    """Per-step comparison of the chained Hessian with its explicit sum."""

    diffs: list[float] = field(default_factory=list)
    means: list[np.ndarray] = field(default_factory=list)
    tol: float = 1e-10

    @property
    def max_diff(self) -> float:
        return max(self.diffs) if self.diffs else 0.0

    @property
    def passed(self) -> bool:
        return self.max_diff <= self.tol


def chained_update_equivalence_check(batches, config: TrainerConfig,
                                     initial: CoefficientState | None = None,
                                     dim: int | None = None, tol: float = 1e-10) -> ChainReport:
    """Run an incremental chain and recompute its Hessian as a discounted sum.

    At step ``t`` the chained store must equal
    ``delta^t H_init + sum_k delta^(t-k) hessian_contrib(batch_k, mean_k)``,
    each contribution evaluated at the mean that step produced.
    """
    if initial is None:
        if dim is None:
            raise ValueError("give either an initial state or a dimension")
        initial = CoefficientState.prior(dim, config.lam, config.hessian_mode)
    report = ChainReport(tol=tol)
    state = initial
    for t, batch in enumerate(batches, 1):
        state = incremental_update(state, batch, config).state
        report.means.append(state.mean)
        explicit = config.delta ** t * initial.hessian
        for k, (bk, mk) in enumerate(zip(batches[:t], report.means), 1):
            explicit = explicit + config.delta ** (t - k) * hessian_contrib(bk, mk, config.hessian_mode)
        report.diffs.append(float(np.max(np.abs(state.hessian - explicit))))
    return report
