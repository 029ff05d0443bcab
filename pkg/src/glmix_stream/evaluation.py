"""Chronological evaluation of model-update strategies.

The stream is split at ``warm_start_ts`` into a cold part, used to train the
initial model, and a warm part cut into increments of length ``delta_ms``.
Every increment is scored first and only then becomes available for
training.  Four update strategies are compared:

``NU``
    the initial model throughout;
``IBU``
    random effects refit on all data before the increment (no delay);
``RWBU``
    the same refit, but only on data older than ``tau_ms`` before the
    increment;
``LL``
    incremental updates of each entity after every increment.

The fixed effect is the initial model's for all strategies.
"""
from __future__ import annotations

import bisect
import csv
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .incremental import incremental_update
from .loss import OffsetInstance, logloss
from .model import (CoefficientState, GameModel, Instance, MiniBatch, SparseVector,
                    TrainerConfig, score, zero_hessian)
from .sampler import derive_seed, sampled_score
from .solver import Design, fit_random_effects, per_entity_solve, train_batch
from .stream import compute_offsets

VARIANTS = ("NU", "IBU", "RWBU", "LL")
HOUR_MS = 3600 * 1000


class DegenerateLabelsError(ValueError):
    """AUC is undefined without both positive and negative labels."""


def auc(scores, labels) -> float:
    """Area under the ROC curve by rank sums; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("need at least one positive and one negative label")
    ranks = rankdata(s)
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class EvalConfig:
    variant: str
    delta_ms: int
    tau_ms: int = 0
    warm_start_ts: int | None = None
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    rounds: int = 3
    seed: int = 0
    sampled_scores: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.delta_ms <= 0:
            raise ValueError("delta_ms must be positive")
        if self.tau_ms < 0:
            raise ValueError("tau_ms must be non-negative")
        if self.variant == "IBU" and self.tau_ms != 0:
            raise ValueError("IBU has no training delay; use RWBU for tau > 0")

    @property
    def delta(self) -> float:
        return self.trainer.delta

    @property
    def hessian_mode(self) -> str:
        return self.trainer.hessian_mode


@dataclass(frozen=True)
class PlannedIncrement:
    index: int
    start_ts: int
    end_ts: int
    train_cutoff_ts: int
    model_version: int


@dataclass(frozen=True)
class EvalPlan:
    variant: str
    warm_start_ts: int
    delta_ms: int
    increments: tuple[PlannedIncrement, ...]

    def cutoffs(self) -> list[int]:
        """Training cutoffs relative to the warm start."""
        return [inc.train_cutoff_ts - self.warm_start_ts for inc in self.increments]


def plan_variant(config: EvalConfig, T: int, warm_start_ts: int = 0) -> EvalPlan:
    """Which data trains the model that scores each increment.

    Increment ``i`` covers ``[ws + i*delta, ws + (i+1)*delta)``; its model is
    trained on data strictly before ``train_cutoff_ts``.
    """
    if T < config.delta_ms:
        raise ValueError("warm span shorter than one increment")
    n = math.ceil(T / config.delta_ms)
    ws, d = warm_start_ts, config.delta_ms
    incs = []
    for i in range(n):
        start = ws + i * d
        if config.variant == "NU":
            cutoff = ws
        elif config.variant == "RWBU":
            cutoff = max(ws, start - config.tau_ms)
        else:
            cutoff = start
        if config.variant == "LL":
            version = i
        elif cutoff == ws:
            version = 0
        else:
            version = len({c.train_cutoff_ts for c in incs if c.train_cutoff_ts != ws}
                          | {cutoff})
        incs.append(PlannedIncrement(i, start, start + d, cutoff, version))
    return EvalPlan(config.variant, ws, d, tuple(incs))


@dataclass
class IncrementResult:
    index: int
    start_ts: int
    n: int
    auc: float
    model_version: int
    degenerate: bool = False


@dataclass
class EvalResult:
    variant: str
    increments: list[IncrementResult]
    aggregate_auc: float
    scores: np.ndarray
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def auc_series(self) -> np.ndarray:
        return np.array([r.auc for r in self.increments])

    def auc_between(self, start_ts: int, end_ts: int | None = None) -> float:
        """Pooled AUC over increments starting in ``[start_ts, end_ts)``."""
        mask = np.zeros(self.scores.shape[0], dtype=bool)
        pos = 0
        for r in self.increments:
            if r.start_ts >= start_ts and (end_ts is None or r.start_ts < end_ts):
                mask[pos:pos + r.n] = True
            pos += r.n
        return auc(self.scores[mask], self.labels[mask])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["increment", "start_ts", "auc", "model_version"])
            for r in self.increments:
                w.writerow([r.index, r.start_ts, _fmt(r.auc), r.model_version])


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def default_warm_start(instances: Sequence[Instance]) -> int:
    """Midpoint of the stream's time span (50/50 split by time)."""
    return (instances[0].timestamp + instances[-1].timestamp + 1) // 2


def _check_sorted(instances):
    ts = [i.timestamp for i in instances]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError("instances must be sorted by timestamp")
    return ts


def ll_apply(model: GameModel, window: Sequence[Instance], config: TrainerConfig,
             batch_seq: int = 0) -> int:
    """Apply one incremental update per entity seen in ``window`` (in place).

    Entities are processed in sorted (type, id) order; each reads the
    current model for its offsets.  Returns the number of updates.
    """
    groups: dict[tuple[str, str], list[Instance]] = defaultdict(list)
    for inst in window:
        for a in inst.re_assignments:
            groups[(a.re_type, a.re_id)].append(inst)
    for key in sorted(groups):
        batch = MiniBatch(key[0], key[1], tuple(groups[key]), batch_seq)
        offsets = compute_offsets(model, batch)
        res = incremental_update(model.state(*key), offsets, config, ts=batch.timestamp)
        model.set_state(key[0], key[1], res.state)
    return len(groups)


def _score_all(model, window, cfg: EvalConfig, inc_index: int) -> np.ndarray:
    if cfg.sampled_scores:
        return np.array([sampled_score(model, inst, derive_seed(cfg.seed, inc_index, j))
                         for j, inst in enumerate(window)])
    return np.array([score(model, inst) for inst in window])


def run_eval(instances: Sequence[Instance], config: EvalConfig,
             base_model: GameModel | None = None) -> EvalResult:
    """Evaluate-then-train over the warm part of a time-ordered stream.

    Parameters
    ----------
    instances : sequence of Instance
        Sorted by timestamp.
    config : EvalConfig
    base_model : GameModel, optional
        Model trained on the cold part; trained here with
        ``train_batch(cold, config.trainer, config.rounds)`` when omitted.

    Returns
    -------
    EvalResult
        Per-increment AUC (NaN and flagged when an increment lacks one of the
        labels) and the AUC pooled over all warm instances.
    """
    ts = _check_sorted(instances)
    ws = config.warm_start_ts if config.warm_start_ts is not None else default_warm_start(instances)
    n_cold = bisect.bisect_left(ts, ws)
    if n_cold == 0 or n_cold == len(instances):
        raise ValueError("warm start leaves the cold or the warm part empty")
    trainer = config.trainer
    if base_model is None:
        base_model = train_batch(instances[:n_cold], trainer, config.rounds)
    T = ts[-1] - ws + 1
    plan = plan_variant(config, max(T, config.delta_ms), ws)

    design = None
    refits: dict[int, GameModel] = {}
    live = base_model.copy() if config.variant == "LL" else None
    prev_refit = None
    results, all_scores, all_labels = [], [], []
    for inc in plan.increments:
        if inc.train_cutoff_ts > inc.start_ts:
            raise AssertionError("plan trains on data the increment evaluates")
        lo = bisect.bisect_left(ts, inc.start_ts)
        hi = bisect.bisect_left(ts, inc.end_ts)
        window = instances[lo:hi]
        if config.variant == "NU":
            model = base_model
        elif config.variant == "LL":
            model = live
        else:
            cut = inc.train_cutoff_ts
            if cut == ws:
                model = base_model
            else:
                if cut not in refits:
                    if design is None:
                        design = Design(instances, base_model.fixed_coeffs.shape[0], base_model.re_dims)
                    n_rows = bisect.bisect_left(ts, cut)
                    refits = {cut: fit_random_effects(base_model, design.head(n_rows), trainer,
                                                      config.rounds, warm_start=prev_refit,
                                                      ts=ts[n_rows - 1])}
                    prev_refit = refits[cut]
                model = refits[cut]
        s = _score_all(model, window, config, inc.index)
        y = np.array([i.label for i in window], dtype=int)
        try:
            a, degenerate = auc(s, y), False
        except DegenerateLabelsError:
            a, degenerate = float("nan"), True
        results.append(IncrementResult(inc.index, inc.start_ts, len(window), a,
                                       inc.model_version, degenerate))
        all_scores.append(s)
        all_labels.append(y)
        if config.variant == "LL" and window:
            ll_apply(live, window, trainer, inc.index)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    labels = np.concatenate(all_labels) if all_labels else np.zeros(0, dtype=int)
    meta = {"variant": config.variant, "delta_ms": config.delta_ms, "tau_ms": config.tau_ms,
            "warm_start_ts": ws, "seed": config.seed, "forgetting": trainer.delta,
            "hessian_mode": trainer.hessian_mode, "n_increments": len(results),
            "degenerate_increments": [r.index for r in results if r.degenerate],
            "tau_exceeds_Delta": config.variant == "RWBU" and config.tau_ms > config.delta_ms}
    return EvalResult(config.variant, results, auc(scores, labels), scores, labels, meta)


# -- decay ----------------------------------------------------------------

@dataclass
class DecayResult:
    """Per-increment AUC after the model's training cutoff, averaged over runs."""

    curves: dict[str, np.ndarray]
    starts: list[int]
    delta_ms: int

    def mean(self, variant: str) -> np.ndarray:
        return np.nanmean(self.curves[variant], axis=0)

    def ci(self, variant: str) -> tuple[np.ndarray, np.ndarray]:
        """95% normal-approximation interval; NaN when there is one run."""
        c = self.curves[variant]
        m = self.mean(variant)
        n = np.sum(~np.isnan(c), axis=0)
        if c.shape[0] < 2:
            nan = np.full_like(m, np.nan)
            return nan, nan
        with np.errstate(invalid="ignore", divide="ignore"):
            half = 1.959963984540054 * np.nanstd(c, axis=0, ddof=1) / np.sqrt(n)
        return m - half, m + half

    @property
    def ci_defined(self) -> bool:
        return len(self.starts) > 1

    def slope(self, variant: str) -> float:
        """Least-squares slope of the mean curve, AUC per increment."""
        m = self.mean(variant)
        k = np.arange(m.size)
        ok = ~np.isnan(m)
        return float(np.polyfit(k[ok], m[ok], 1)[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["increment", "variant", "auc_mean", "ci_lo", "ci_hi"])
            for v in sorted(self.curves):
                m = self.mean(v)
                lo, hi = self.ci(v)
                for k in range(m.size):
                    w.writerow([k, v, _fmt(float(m[k])), _fmt(float(lo[k])), _fmt(float(hi[k]))])


def decay_experiment(instances: Sequence[Instance], config: EvalConfig, horizon_increments: int,
                     n_runs: int, start_range: tuple[int, int] | None = None,
                     seed: int | None = None) -> DecayResult:
    """NU and LL accuracy as a function of time since the batch model was trained.

    For each run a start time ``t0`` is drawn uniformly from ``start_range``
    (default: from a quarter of the stream to the last time leaving room for
    the horizon); a model is batch-trained on everything before ``t0`` and
    both variants are scored on the following ``horizon_increments``
    increments of ``config.delta_ms``.
    """
    ts = _check_sorted(instances)
    if horizon_increments < 1 or n_runs < 1:
        raise ValueError("horizon and run count must be positive")
    horizon_ms = horizon_increments * config.delta_ms
    if start_range is None:
        start_range = (ts[0] + (ts[-1] - ts[0]) // 4, ts[-1] + 1 - horizon_ms)
    lo, hi = start_range
    if hi <= lo or hi + horizon_ms > ts[-1] + 1 + config.delta_ms:
        raise ValueError("horizon does not fit in the stream")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    starts = sorted(int(s) for s in rng.integers(lo, hi, size=n_runs))
    curves = {"NU": np.full((n_runs, horizon_increments), np.nan),
              "LL": np.full((n_runs, horizon_increments), np.nan)}
    for r, t0 in enumerate(starts):
        n0 = bisect.bisect_left(ts, t0)
        base = train_batch(instances[:n0], config.trainer, config.rounds)
        live = base.copy()
        for k in range(horizon_increments):
            a = bisect.bisect_left(ts, t0 + k * config.delta_ms)
            b = bisect.bisect_left(ts, t0 + (k + 1) * config.delta_ms)
            window = instances[a:b]
            y = [i.label for i in window]
            for name, model in (("NU", base), ("LL", live)):
                try:
                    curves[name][r, k] = auc([score(model, i) for i in window], y)
                except DegenerateLabelsError:
                    pass
            if window:
                ll_apply(live, window, config.trainer, k)
    return DecayResult(curves, starts, config.delta_ms)


# -- forgetting-factor sweep ---------------------------------------------

@dataclass
class SweepResult:
    deltas: list[float]
    Deltas: list[int]
    raw: np.ndarray

    @property
    def scaled(self) -> np.ndarray:
        """Column-wise z-scores (per update interval); NaN where undefined."""
        mu = self.raw.mean(axis=0, keepdims=True)
        sd = self.raw.std(axis=0, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sd > 0, (self.raw - mu) / np.where(sd > 0, sd, 1.0), np.nan)

    def best_delta(self) -> dict[int, float]:
        return {D: self.deltas[int(np.argmax(self.raw[:, j]))] for j, D in enumerate(self.Deltas)}

    def to_csv(self, path) -> None:
        sc = self.scaled
        rows = sorted(((d, D, self.raw[i, j], sc[i, j])
                       for i, d in enumerate(self.deltas) for j, D in enumerate(self.Deltas)),
                      key=lambda r: (r[0], r[1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "Delta", "auc_raw", "auc_scaled"])
            for d, D, a, s in rows:
                w.writerow([repr(float(d)), int(D), _fmt(float(a)), _fmt(float(s))])


def _sweep_cell(args):
    instances, cfg, base = args
    return run_eval(instances, cfg, base).aggregate_auc


def delta_sweep(instances: Sequence[Instance], deltas: Sequence[float], Deltas: Sequence[int],
                config: EvalConfig, base_model: GameModel | None = None,
                workers: int = 1) -> SweepResult:
    """Aggregate LL AUC for every (forgetting factor, update interval) pair."""
    if not deltas or not Deltas:
        raise ValueError("empty sweep grid")
    if base_model is None:
        ts = _check_sorted(instances)
        ws = config.warm_start_ts if config.warm_start_ts is not None else default_warm_start(instances)
        base_model = train_batch(instances[:bisect.bisect_left(ts, ws)], config.trainer, config.rounds)
    cells = []
    for d in deltas:
        for D in Deltas:
            cfg = replace(config, variant="LL", delta_ms=int(D), tau_ms=0,
                          trainer=config.trainer.replace(delta=float(d)))
            cells.append((instances, cfg, base_model))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            vals = list(ex.map(_sweep_cell, cells))
    else:
        vals = [_sweep_cell(c) for c in cells]
    raw = np.array(vals).reshape(len(deltas), len(Deltas))
    return SweepResult([float(d) for d in deltas], [int(D) for D in Deltas], raw)


# -- optimality-gap checks -----------------------------------------------

@dataclass(frozen=True)
class GapRow:
    t: int
    gap: float
    bound: float
    gamma_bar: float
    passed: bool
    nonnegative: bool


@dataclass
class GapReport:
    rows: list[GapRow]
    C: float
    atol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_csv(self, path, trial: int | None = None, append: bool = False) -> None:
        write_gap_rows(path, [(trial, r) for r in self.rows], append)


def write_gap_rows(path, rows, append=False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["t", "gap", "bound", "gamma_bar", "pass", "trial"])
        for trial, r in rows:
            w.writerow([r.t, repr(r.gap), repr(r.bound), repr(r.gamma_bar), int(r.passed),
                        "" if trial is None else trial])


def discounted_objective(batches: Sequence, beta, delta: float, lam: float) -> float:
    """``sum_k delta^(t-k) f_k(beta) + (lam/2)||beta||^2`` over batches 0..t."""
    t = len(batches) - 1
    val = sum(delta ** (t - k) * logloss(b, beta) for k, b in enumerate(batches))
    return val + 0.5 * lam * float(np.dot(beta, beta))


def theorem_gap_check(initial_batch, batches, config: TrainerConfig, C: float = 10.0,
                      atol: float = 1e-9) -> GapReport:
    """Compare the stale batch optimum with incremental iterates on the true loss.

    ``initial_batch`` is solved exactly (prior N(0, 1/lam)) to give the
    stale optimum; the incremental chain then consumes ``batches``.  At each
    step ``t`` the discounted cumulative objective over batches ``0..t`` is
    evaluated at both points.  The step passes when
    ``gap >= (lam/2)||b0 - bt||^2 - C * gamma_bar^3`` (within ``atol``), where
    ``gamma_bar`` is the largest distance from any iterate to ``b0`` or
    ``bt``.
    """
    if not initial_batch:
        raise ValueError("initial batch is empty")
    d = 1 + max(inst.features.max_index for b in [initial_batch, *batches] for inst in b)
    tight = config.replace(solver_tol=min(config.solver_tol, 1e-10), solver_max_iter=max(config.solver_max_iter, 200))
    zero_H = zero_hessian(d, config.hessian_mode)
    b0, H0 = per_entity_solve(initial_batch, np.zeros(d), zero_H, 0.0, config.lam, tight, mode="full")
    state = CoefficientState(b0, H0, config.lam)
    iterates = [b0]
    seen = [list(initial_batch)]
    rows = []
    for t, batch in enumerate(batches, 1):
        state = incremental_update(state, batch, tight).state
        bt = state.mean
        iterates.append(bt)
        seen.append(list(batch))
        gap = (discounted_objective(seen, b0, config.delta, config.lam)
               - discounted_objective(seen, bt, config.delta, config.lam))
        bound = 0.5 * config.lam * float(np.sum((b0 - bt) ** 2))
        gbar = max(max(float(np.linalg.norm(b - bt)), float(np.linalg.norm(b - b0))) for b in iterates)
        rows.append(GapRow(t, gap, bound, gbar, gap >= bound - C * gbar ** 3 - atol, gap >= -atol))
    return GapReport(rows, C, atol)


def random_theorem_problem(rng: np.random.Generator, max_dim: int = 4, max_initial: int = 50,
                           max_batch: int = 20, max_steps: int = 5,
                           deltas=(0.5, 0.9, 1.0), lams=(0.5, 1.0, 2.0), drift: float | None = None):
    """A small random offset-logistic problem: (initial batch, batches, config)."""
    d = int(rng.integers(1, max_dim + 1))
    n0 = int(rng.integers(max(2, max_initial // 5), max_initial + 1))
    steps = int(rng.integers(1, max_steps + 1))
    drift = float(rng.choice([0.0, 0.02, 0.1, 0.3])) if drift is None else drift
    w = rng.standard_normal(d)

    def draw(n, w):
        Z = rng.standard_normal((n, d))
        off = 0.5 * rng.standard_normal(n)
        p = 1.0 / (1.0 + np.exp(-(off + Z @ w)))
        y = (rng.random(n) < p).astype(int)
        return [OffsetInstance(float(o), SparseVector.from_dense(z), int(l)) for o, z, l in zip(off, Z, y)]

    initial = draw(n0, w)
    batches = []
    for _ in range(steps):
        w = w + drift * rng.standard_normal(d)
        batches.append(draw(int(rng.integers(1, max_batch + 1)), w))
    cfg = TrainerConfig(delta=float(rng.choice(deltas)), lam=float(rng.choice(lams)))
    return initial, batches, cfg


def theorem_suite(trials: int = 100, seed: int = 0, C: float = 10.0, hessian_mode: str = "full",
                  prior_form: str = "anchored"):
    """Run :func:`theorem_gap_check` on ``trials`` seeded random problems."""
    reports = []
    for k in range(trials):
        rng = np.random.default_rng([seed, k])
        initial, batches, cfg = random_theorem_problem(rng)
        cfg = cfg.replace(hessian_mode=hessian_mode, prior_form=prior_form)
        reports.append(theorem_gap_check(initial, batches, cfg, C=C))
    return reports
