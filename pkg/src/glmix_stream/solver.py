"""Offline (batch) training of mixed-effect logistic models.

The per-entity problem shared by batch and incremental training is

    minimize  (w/2) ||beta - m||^2_P + logloss(batch, beta) + (lam/2) ||beta||^2

with ``P`` a full or diagonal curvature store.  Full-mode problems are solved
by damped Newton; diagonal-mode problems by gradient descent scaled with the
diagonal of the objective Hessian.  Both use Armijo backtracking.

:func:`train_batch` fits the complete model by backfitting: the fixed effect
first, then every random effect of every type with all other scores held as
offsets.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .loss import DenseBatch, SCORE_CLAMP, as_dense, curvature_weights, hessian_contrib
from .model import (CoefficientState, DimensionMismatchError, GameModel, Instance,
                    SchemaError, TrainerConfig)

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 60
# decreases smaller than this fraction of |f| are lost in rounding
ROUNDING_SLOPE = 64 * np.finfo(np.float64).eps
NONMONOTONE_WINDOW = 10
BB_MIN, BB_MAX = 1e-4, 1e4


class SolverError(RuntimeError):
    """The solver stopped before reaching the gradient tolerance."""

    def __init__(self, message, last_iterate=None, grad_norm=float("nan")):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class _Objective:
    def __init__(self, b: DenseBatch, prior_mean, prior_H, weight, lam):
        self.b = b
        self.m = prior_mean
        self.P = prior_H
        self.w = float(weight)
        self.lam = float(lam)
        self.full = prior_H.ndim == 2

    def _prior_mv(self, v):
        return self.P @ v if self.full else self.P * v

    def value(self, beta) -> float:
        r = beta - self.m
        val = 0.5 * self.w * float(r @ self._prior_mv(r)) + 0.5 * self.lam * float(beta @ beta)
        if len(self.b):
            s = np.clip(self.b.offsets + self.b.Z @ beta, -SCORE_CLAMP, SCORE_CLAMP)
            val += float(np.sum(np.logaddexp(0.0, s) - self.b.labels * s))
        return val

    def gradient(self, beta) -> np.ndarray:
        g = self.w * self._prior_mv(beta - self.m) + self.lam * beta
        if len(self.b):
            s = np.clip(self.b.offsets + self.b.Z @ beta, -SCORE_CLAMP, SCORE_CLAMP)
            g = g + self.b.Z.T @ (1.0 / (1.0 + np.exp(-s)) - self.b.labels)
        return g

    def newton_matrix(self, beta) -> np.ndarray:
        d = beta.shape[0]
        A = self.w * (self.P if self.full else np.diag(self.P)) + self.lam * np.eye(d)
        if len(self.b):
            wts = curvature_weights(self.b, beta)
            A = A + (self.b.Z.T * wts) @ self.b.Z
        return A

    def diagonal_scale(self, beta) -> np.ndarray:
        D = self.w * (np.diag(self.P) if self.full else self.P) + self.lam
        if len(self.b):
            wts = curvature_weights(self.b, beta)
            D = D + wts @ (self.b.Z * self.b.Z)
        return D


def _solve(obj: _Objective, start, mode: str, tol: float, max_iter: int):
    """Newton (full) or diagonally scaled gradient descent (diagonal).

    The scaled gradient steps take a Barzilai-Borwein length in the metric of
    the diagonal scale and are accepted by a non-monotone Armijo test against
    the worst of the last ``NONMONOTONE_WINDOW`` objective values.
    """
    beta = np.array(start, dtype=np.float64)
    f = obj.value(beta)
    if not np.isfinite(f):
        raise SolverError("non-finite objective at start", beta, float("nan"))
    g = obj.gradient(beta)
    gnorm = float(np.linalg.norm(g))
    recent = [f]
    alpha = 1.0
    for _ in range(max_iter):
        if gnorm <= tol:
            return beta, gnorm
        if mode == "full":
            A = obj.newton_matrix(beta)
            try:
                p = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                p = -np.linalg.lstsq(A, g, rcond=None)[0]
            f_ref = f
        else:
            D = obj.diagonal_scale(beta)
            D = np.where(D > 0, D, 1.0)
            p = -alpha * g / D
            f_ref = max(recent[-NONMONOTONE_WINDOW:])
        slope = float(g @ p)
        if slope >= 0:
            p, slope = -g, -float(g @ g)
        rounding = -slope <= ROUNDING_SLOPE * (1.0 + abs(f))
        if rounding and mode == "full":
            # predicted decrease is below the resolution of f: judge the step by the gradient
            cand = beta + p
            gc = obj.gradient(cand)
            gcn = float(np.linalg.norm(gc))
            if not gcn < gnorm:
                break
            beta, f, g, gnorm = cand, obj.value(cand), gc, gcn
            recent.append(f)
            continue
        if rounding:
            # f cannot rank the candidates here; the BB iteration is not monotone anyway
            cand = beta + p
            fc = obj.value(cand)
        else:
            t = 1.0
            for _ in range(MAX_HALVINGS):
                cand = beta + t * p
                fc = obj.value(cand)
                if fc <= f_ref + ARMIJO_C * t * slope:
                    break
                t *= 0.5
            else:
                raise SolverError(f"line search failed at grad norm {gnorm:.3e}", beta, gnorm)
        if not np.isfinite(fc):
            raise SolverError("non-finite objective", cand, gnorm)
        gc = obj.gradient(cand)
        if mode != "full":
            step, dg = cand - beta, gc - g
            sy = float(step @ dg)
            alpha = float(step @ (D * step)) / sy if sy > 0 else 1.0
            alpha = min(max(alpha, BB_MIN), BB_MAX)
        beta, f, g = cand, fc, gc
        gnorm = float(np.linalg.norm(g))
        recent.append(f)
    if gnorm <= tol:
        return beta, gnorm
    raise SolverError(
        f"no convergence in {max_iter} iterations (grad norm {gnorm:.3e} > {tol:.1e})",
        beta, gnorm)


def per_entity_solve(batch, prior_mean, prior_H, delta_weight: float, lam: float,
                     config: TrainerConfig, start=None, mode: str | None = None):
    """Minimize the prior-anchored, L2-regularized offset log-loss.

    Parameters
    ----------
    batch : list of OffsetInstance or DenseBatch
    prior_mean : array, shape (d,)
    prior_H : array, shape (d, d) or (d,)
        Curvature of the quadratic anchor (full or diagonal).
    delta_weight : float
        Weight ``w >= 0`` of the quadratic anchor.
    lam : float
        L2 penalty on ``beta`` itself.
    config : TrainerConfig
        Supplies tolerance, iteration cap, and the default solver mode.
    start : array, optional
        Initial iterate; defaults to ``prior_mean``.
    mode : {"full", "diagonal"}, optional
        Overrides ``config.hessian_mode`` for the choice of solver.

    Returns
    -------
    mean : array, shape (d,)
    hessian : array
        Data curvature of ``batch`` at ``mean``, in the same mode as ``prior_H``.
    """
    prior_mean = np.asarray(prior_mean, dtype=np.float64)
    prior_H = np.asarray(prior_H, dtype=np.float64)
    if delta_weight < 0:
        raise ValueError("delta_weight must be non-negative")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    d = prior_mean.shape[0]
    if prior_H.shape not in ((d,), (d, d)):
        raise DimensionMismatchError(f"prior_H shape {prior_H.shape} does not match dimension {d}")
    b = as_dense(batch, d)
    obj = _Objective(b, prior_mean, prior_H, delta_weight, lam)
    x0 = prior_mean if start is None else np.asarray(start, dtype=np.float64)
    beta, _ = _solve(obj, x0, mode or config.hessian_mode, config.solver_tol, config.solver_max_iter)
    store_mode = "full" if prior_H.ndim == 2 else "diagonal"
    return beta, hessian_contrib(b, beta, store_mode)


def objective_gradient(batch, beta, prior_mean, prior_H, delta_weight, lam) -> np.ndarray:
    """Gradient of the per-entity objective; used to verify solver output."""
    beta = np.asarray(beta, dtype=np.float64)
    obj = _Objective(as_dense(batch, beta.shape[0]), np.asarray(prior_mean, dtype=np.float64),
                     np.asarray(prior_H, dtype=np.float64), delta_weight, lam)
    return obj.gradient(beta)


def objective_value(batch, beta, prior_mean, prior_H, delta_weight, lam) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    obj = _Objective(as_dense(batch, beta.shape[0]), np.asarray(prior_mean, dtype=np.float64),
                     np.asarray(prior_H, dtype=np.float64), delta_weight, lam)
    return obj.value(beta)


@dataclass
class _Group:
    re_id: str
    rows: np.ndarray
    Z: np.ndarray


class Design:
    """Dense arrays for a list of instances, grouped by random effect.

    Groups keep their rows in input order, so :meth:`head` can restrict the
    design to a prefix of a time-ordered stream without rebuilding it.
    """

    def __init__(self, data: Sequence[Instance], fixed_dim: int, re_dims: dict[str, int]):
        n = len(data)
        self.n = n
        self.X = np.zeros((n, fixed_dim))
        self.y = np.empty(n)
        rows = defaultdict(lambda: defaultdict(list))
        for i, inst in enumerate(data):
            fx = inst.fixed_features
            if len(fx):
                if fx.indices[-1] >= fixed_dim:
                    raise DimensionMismatchError(
                        f"fixed feature index {int(fx.indices[-1])} out of range for dimension {fixed_dim}")
                self.X[i, fx.indices] = fx.values
            self.y[i] = inst.label
            for a in inst.re_assignments:
                if a.re_type not in re_dims:
                    raise SchemaError(f"undeclared random-effect type {a.re_type!r}")
                rows[a.re_type][a.re_id].append((i, a.features))
        self.groups: dict[str, list[_Group]] = {}
        for r in sorted(re_dims):
            d = re_dims[r]
            groups = []
            for l in sorted(rows.get(r, {})):
                members = rows[r][l]
                Z = np.zeros((len(members), d))
                for j, (_, f) in enumerate(members):
                    if len(f):
                        if f.indices[-1] >= d:
                            raise DimensionMismatchError(
                                f"feature index {int(f.indices[-1])} out of range for {r!r} (dim {d})")
                        Z[j, f.indices] = f.values
                groups.append(_Group(l, np.array([i for i, _ in members], dtype=np.int64), Z))
            self.groups[r] = groups

    def head(self, n: int) -> "Design":
        """The design of the first ``n`` instances."""
        out = object.__new__(Design)
        out.n = n
        out.X = self.X[:n]
        out.y = self.y[:n]
        out.groups = {}
        for r, groups in self.groups.items():
            kept = []
            for g in groups:
                m = int(np.searchsorted(g.rows, n))
                if m:
                    kept.append(_Group(g.re_id, g.rows[:m], g.Z[:m]))
            out.groups[r] = kept
        return out


def infer_schema(data: Sequence[Instance]) -> tuple[int, dict[str, int]]:
    """Smallest fixed dimension and per-type dimensions covering ``data``."""
    fixed_dim = 0
    re_dims: dict[str, int] = {}
    for inst in data:
        fixed_dim = max(fixed_dim, inst.fixed_features.max_index + 1)
        for a in inst.re_assignments:
            re_dims[a.re_type] = max(re_dims.get(a.re_type, 0), a.features.max_index + 1)
    return fixed_dim, re_dims


def _backfit(design: Design, beta_f, lam_f, re_lams, means, config: TrainerConfig,
             rounds: int, fit_fixed: bool, history: list | None):
    newton = config.replace(hessian_mode="full")
    re_scores = {r: np.zeros(design.n) for r in design.groups}
    for r, groups in design.groups.items():
        for g in groups:
            m = means.get((r, g.re_id))
            if m is not None:
                re_scores[r][g.rows] = g.Z @ m
    d_f = design.X.shape[1]
    for rnd in range(rounds):
        if fit_fixed:
            offsets = sum(re_scores.values()) if re_scores else np.zeros(design.n)
            fb = DenseBatch(design.X, np.asarray(offsets, dtype=np.float64), design.y)
            beta_f, _ = per_entity_solve(fb, np.zeros(d_f), np.zeros((d_f, d_f)), 0.0, lam_f,
                                         newton, start=beta_f)
        fixed = design.X @ beta_f
        for r, groups in design.groups.items():
            others = fixed + sum((re_scores[s] for s in design.groups if s != r), np.zeros(design.n))
            d = groups[0].Z.shape[1] if groups else 0
            for g in groups:
                b = DenseBatch(g.Z, others[g.rows], design.y[g.rows])
                start = means.get((r, g.re_id))
                m, _ = per_entity_solve(b, np.zeros(d), np.zeros((d, d)), 0.0, re_lams[r],
                                        newton, start=start)
                means[(r, g.re_id)] = m
                re_scores[r][g.rows] = g.Z @ m
        if history is not None:
            history.append(_total_objective(design, beta_f, means, re_scores, lam_f, re_lams))
        log.debug("backfit round %d done", rnd)
    return beta_f, means, re_scores


def _total_objective(design, beta_f, means, re_scores, lam_f, re_lams) -> float:
    s = design.X @ beta_f + sum(re_scores.values(), np.zeros(design.n))
    s = np.clip(s, -SCORE_CLAMP, SCORE_CLAMP)
    val = float(np.sum(np.logaddexp(0.0, s) - design.y * s))
    val += 0.5 * lam_f * float(beta_f @ beta_f)
    for (r, _), m in means.items():
        val += 0.5 * re_lams[r] * float(m @ m)
    return val


def _final_states(design, beta_f, means, re_scores, re_lams, mode, ts) -> dict:
    fixed = design.X @ beta_f
    states = {}
    for r, groups in design.groups.items():
        others = fixed + sum((re_scores[s] for s in design.groups if s != r), np.zeros(design.n))
        for g in groups:
            m = means[(r, g.re_id)]
            b = DenseBatch(g.Z, others[g.rows], design.y[g.rows])
            H = hessian_contrib(b, m, mode)
            states[(r, g.re_id)] = CoefficientState(m, H, re_lams[r], 0, ts)
    return states


def train_batch(data: Sequence[Instance], config: TrainerConfig, rounds: int = 3, *,
                fixed_dim: int | None = None, re_dims: dict[str, int] | None = None,
                history: list | None = None) -> GameModel:
    """Fit fixed and random effects on ``data`` by backfitting.

    Each round fits the fixed effect with all random-effect scores as
    offsets, then every random effect (types and ids in sorted order) with
    every other score as offset.  The final random-effect states carry the
    data Hessian of their group at the fitted mean.

    If ``history`` is a list, the total regularized objective after each
    round is appended to it.
    """
    if not data:
        raise ValueError("empty training data")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if fixed_dim is None or re_dims is None:
        fd, rd = infer_schema(data)
        fixed_dim = fd if fixed_dim is None else fixed_dim
        re_dims = rd if re_dims is None else re_dims
    design = Design(data, fixed_dim, re_dims)
    re_lams = {r: config.lam_for(r) for r in re_dims}
    beta_f, means, re_scores = _backfit(design, np.zeros(fixed_dim), config.lam, re_lams, {},
                                        config, rounds, True, history)
    ts = max(inst.timestamp for inst in data)
    states = _final_states(design, beta_f, means, re_scores, re_lams, config.hessian_mode, ts)
    return GameModel(beta_f, dict(re_dims), states, config.lam, config.hessian_mode,
                     dict(config.lam_by_type), {"trained_until_ts": ts + 1, "rounds": rounds})


def retrain_random_effects(base: GameModel, data: Sequence[Instance], config: TrainerConfig,
                           rounds: int = 1, warm_start: GameModel | None = None) -> GameModel:
    """Refit only the random effects on ``data``, holding ``base.fixed_coeffs``.

    Entities absent from ``data`` are left at the prior.  ``warm_start``
    supplies initial iterates.  With a single random-effect type every
    entity is solved exactly and the start only changes run time; with
    several types the result depends on it through the finite number of
    backfitting rounds.
    """
    if not data:
        raise ValueError("empty training data")
    design = Design(data, base.fixed_coeffs.shape[0], base.re_dims)
    ts = max(inst.timestamp for inst in data)
    return fit_random_effects(base, design, config, rounds, warm_start, ts)


def fit_random_effects(base: GameModel, design: Design, config: TrainerConfig, rounds: int = 1,
                       warm_start: GameModel | None = None, ts: int = 0) -> GameModel:
    """:func:`retrain_random_effects` on a prebuilt :class:`Design`."""
    if design.n == 0:
        raise ValueError("empty training data")
    re_lams = {r: base.lam_for(r) for r in base.re_dims}
    present = {(r, g.re_id) for r, groups in design.groups.items() for g in groups}
    means = {}
    if warm_start is not None:
        means = {k: st.mean for k, st in warm_start.random_effects.items() if k in present}
    if len(design.groups) <= 1:
        rounds = 1
    _, means, re_scores = _backfit(design, base.fixed_coeffs, config.lam, re_lams, means,
                                   config, rounds, False, None)
    states = _final_states(design, base.fixed_coeffs, means, re_scores, re_lams,
                           config.hessian_mode, ts)
    return GameModel(base.fixed_coeffs, dict(base.re_dims), states, base.lam, config.hessian_mode,
                     dict(base.lam_by_type), {"trained_until_ts": ts + 1})
