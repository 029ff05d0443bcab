"""In-process simulation of the nearline update pipeline.

Instances are routed to one accumulator per random-effect id; a trigger
policy turns accumulators into mini-batches; each mini-batch is applied with
a read-train-write (RTW) transaction against a versioned coefficient store.

The store simulates a weakly consistent key-value backend: a plain read at
time ``now`` only sees writes made at or before ``now - read_staleness_ms``.
An optional TTL cache in front of it restores read-your-writes for the
process that made the write.  All time comes from an injected
:class:`SimClock`.
"""
from __future__ import annotations

import json
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .incremental import CovarianceError, incremental_update, posterior_covariance
from .loss import OffsetInstance
from .model import (CoefficientState, GameModel, Instance, MiniBatch, TrainerConfig,
                    fixed_score, re_contribution)
from .solver import SolverError

Key = tuple[str, str]
_NEVER = float("-inf")


class SimClock:
    def __init__(self, now_ms: int = 0):
        self.now_ms = int(now_ms)

    def advance(self, ms: int) -> int:
        self.now_ms += int(ms)
        return self.now_ms

    def set(self, now_ms: int) -> None:
        self.now_ms = int(now_ms)


@dataclass(frozen=True)
class TriggerPolicy:
    """Fire a mini-batch on count, on age, or for high-variance entities."""

    max_count: int | None = None
    max_age_ms: int | None = None
    variance_threshold: float | None = None

    def __post_init__(self):
        if self.max_count is None and self.max_age_ms is None and self.variance_threshold is None:
            raise ValueError("a trigger policy needs at least one criterion")
        if self.max_count is not None and self.max_count < 1:
            raise ValueError("max_count must be positive")
        if self.max_age_ms is not None and self.max_age_ms < 1:
            raise ValueError("max_age_ms must be positive")
        if self.variance_threshold is not None and not self.variance_threshold > 0:
            raise ValueError("variance_threshold must be positive")


@dataclass
class _Accumulator:
    opened_at: int
    instances: list = field(default_factory=list)


class BatchAssembler:
    """Partitions a stream by random-effect id and emits triggered mini-batches.

    ``variance_of(key)`` reports an entity's current posterior variance; it is
    needed only when the policy has a variance threshold.
    """

    def __init__(self, policy: TriggerPolicy, clock: SimClock,
                 variance_of: Callable[[Key], float] | None = None):
        if policy.variance_threshold is not None and variance_of is None:
            raise ValueError("variance trigger requires a variance_of callback")
        self.policy = policy
        self.clock = clock
        self.variance_of = variance_of
        self._acc: dict[Key, _Accumulator] = {}
        self._seq: dict[Key, int] = defaultdict(int)

    def _emit(self, key: Key) -> MiniBatch:
        acc = self._acc.pop(key)
        seq = self._seq[key]
        self._seq[key] += 1
        return MiniBatch(key[0], key[1], tuple(acc.instances), seq)

    def _due(self, key: Key) -> bool:
        acc = self._acc[key]
        p = self.policy
        if p.max_count is not None and len(acc.instances) >= p.max_count:
            return True
        if p.max_age_ms is not None and self.clock.now_ms - acc.opened_at >= p.max_age_ms:
            return True
        if p.variance_threshold is not None and self.variance_of(key) >= p.variance_threshold:
            return True
        return False

    def ingest(self, inst: Instance) -> list[MiniBatch]:
        fired = []
        for a in inst.re_assignments:
            key = (a.re_type, a.re_id)
            acc = self._acc.get(key)
            if acc is None:
                acc = self._acc[key] = _Accumulator(self.clock.now_ms)
            acc.instances.append(inst)
            if self._due(key):
                fired.append(self._emit(key))
        return fired

    def tick(self) -> list[MiniBatch]:
        return [self._emit(k) for k in sorted(self._acc) if self._due(k)]

    def flush(self) -> list[MiniBatch]:
        return [self._emit(k) for k in sorted(self._acc)]

    def pending(self, key: Key) -> int:
        acc = self._acc.get(key)
        return 0 if acc is None else len(acc.instances)


class StaleWriteError(RuntimeError):
    """A write would not advance the key's version (lost update)."""


@dataclass(frozen=True)
class DeadLetter:
    batch: MiniBatch
    error: str


class CoefficientStore:
    """Versioned per-key coefficient store with simulated staleness and TTL cache.

    The store also exposes the read interface of :class:`GameModel`
    (``fixed_coeffs``, ``re_dims``, ``state``, ``mean_of``) so it can be
    scored against directly.
    """

    def __init__(self, model: GameModel, clock: SimClock | None = None,
                 read_staleness_ms: int = 0, ttl_ms: int = 0):
        if read_staleness_ms < 0 or ttl_ms < 0:
            raise ValueError("staleness and ttl must be non-negative")
        self.clock = clock or SimClock()
        self.read_staleness_ms = int(read_staleness_ms)
        self.ttl_ms = int(ttl_ms)
        self._mutex = threading.Lock()
        self._locks: dict[Key, threading.Lock] = {}
        self.dead_letters: list[DeadLetter] = []
        self.events: list[dict] = []
        self.load_snapshot(model)

    # -- snapshot / schema ---------------------------------------------------
    def load_snapshot(self, model: GameModel) -> None:
        """Replace every state with the snapshot's; clears history and cache."""
        with self._mutex:
            self.fixed_coeffs = model.fixed_coeffs
            self.re_dims = dict(model.re_dims)
            self.lam = model.lam
            self.lam_by_type = dict(model.lam_by_type)
            self.hessian_mode = model.hessian_mode
            self._history: dict[Key, list[tuple[float, CoefficientState]]] = {
                k: [(_NEVER, st)] for k, st in model.random_effects.items()}
            self._cache: dict[Key, tuple[CoefficientState, int]] = {}

    def lam_for(self, re_type: str) -> float:
        return float(self.lam_by_type.get(re_type, self.lam))

    def _prior(self, key: Key) -> CoefficientState:
        return CoefficientState.prior(self.re_dims[key[0]], self.lam_for(key[0]), self.hessian_mode)

    # -- reads ---------------------------------------------------------------
    def lock(self, key: Key) -> threading.Lock:
        lk = self._locks.get(key)
        if lk is None:
            with self._mutex:
                lk = self._locks.setdefault(key, threading.Lock())
        return lk

    def _backing_read(self, key: Key) -> CoefficientState | None:
        hist = self._history.get(key)
        if not hist:
            return None
        horizon = self.clock.now_ms - self.read_staleness_ms
        for written_at, st in reversed(hist):
            if written_at <= horizon:
                return st
        return None

    def _read(self, key: Key) -> CoefficientState | None:
        if self.ttl_ms:
            hit = self._cache.get(key)
            if hit is not None and self.clock.now_ms < hit[1]:
                return hit[0]
        return self._backing_read(key)

    def read(self, re_type: str, re_id: str) -> CoefficientState:
        st = self._read((re_type, re_id))
        return self._prior((re_type, re_id)) if st is None else st

    state = read

    def mean_of(self, re_type: str, re_id: str):
        st = self._read((re_type, re_id))
        return None if st is None else st.mean

    def latest(self, re_type: str, re_id: str) -> CoefficientState:
        """Most recent write, bypassing staleness; for inspection and tests."""
        hist = self._history.get((re_type, re_id))
        return hist[-1][1] if hist else self._prior((re_type, re_id))

    def keys(self) -> list[Key]:
        return sorted(self._history)

    def version_history(self, key: Key) -> list[int]:
        return [st.version for _, st in self._history.get(key, [])]

    # -- writes --------------------------------------------------------------
    def write(self, key: Key, st: CoefficientState) -> None:
        with self._mutex:
            hist = self._history.setdefault(key, [])
            current = hist[-1][1].version if hist else 0
            if st.version <= current:
                raise StaleWriteError(
                    f"write of version {st.version} to {key} does not advance current {current}")
            hist.append((self.clock.now_ms, st))
            if self.ttl_ms:
                self._cache[key] = (st, self.clock.now_ms + self.ttl_ms)

    def max_variance(self, key: Key) -> float:
        cov = posterior_covariance(self.read(*key))
        return float(np.max(cov if cov.ndim == 1 else np.diag(cov)))

    def to_model(self) -> GameModel:
        states = {k: hist[-1][1] for k, hist in self._history.items() if hist}
        return GameModel(self.fixed_coeffs, dict(self.re_dims), states, self.lam,
                         self.hessian_mode, dict(self.lam_by_type))

    def write_event_log(self, path) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True))
                fh.write("\n")


def compute_offsets(model, batch: MiniBatch) -> list[OffsetInstance]:
    """Offsets for the batch's entity: fixed score plus every other type's score."""
    out = []
    for inst in batch.instances:
        zeta = fixed_score(model, inst)
        for a in inst.re_assignments:
            if a.re_type != batch.re_type:
                zeta += re_contribution(model, inst, a.re_type)
        out.append(OffsetInstance(zeta, inst.assignment(batch.re_type).features, inst.label))
    return out


def rtw(store: CoefficientStore, batch: MiniBatch, config: TrainerConfig) -> int:
    """Read-train-write one mini-batch under the entity's lock.

    Returns the version now current for the key.  On a solver failure or a
    lost-update conflict the state is left unchanged and the batch goes to
    ``store.dead_letters``.
    """
    key = batch.key
    with store.lock(key):
        state = store.read(*key)
        try:
            offsets = compute_offsets(store, batch)
            res = incremental_update(state, offsets, config, ts=batch.timestamp)
            store.write(key, res.state)
        except (SolverError, StaleWriteError, CovarianceError) as exc:
            store.dead_letters.append(DeadLetter(batch, f"{type(exc).__name__}: {exc}"))
            return state.version
        store.events.append({
            "key": list(key), "version": res.state.version, "ts": store.clock.now_ms,
            "batch_seq": batch.batch_seq, "n": len(batch),
            "loss_before": res.batch_loss_before, "loss_after": res.batch_loss_after,
        })
        return res.state.version


class ReplayBuffer:
    """Recent mini-batches kept for replay on top of a fresh batch snapshot."""

    def __init__(self, capacity_ms: int):
        if capacity_ms <= 0:
            raise ValueError("capacity_ms must be positive")
        self.capacity_ms = int(capacity_ms)
        self._entries: dict[Key, deque] = defaultdict(deque)
        self.newest_ts: int | None = None

    def add(self, batch: MiniBatch) -> None:
        self._entries[batch.key].append(batch)
        ts = batch.timestamp
        self.newest_ts = ts if self.newest_ts is None else max(self.newest_ts, ts)
        self._evict()

    def _evict(self) -> None:
        floor = self.newest_ts - self.capacity_ms
        for key in list(self._entries):
            q = self._entries[key]
            while q and q[0].timestamp < floor:
                q.popleft()
            if not q:
                del self._entries[key]

    def batches_after(self, ts: int) -> list[MiniBatch]:
        out = [b for q in self._entries.values() for b in q if b.timestamp > ts]
        return sorted(out, key=lambda b: (b.timestamp, b.key, b.batch_seq))

    def __len__(self) -> int:
        return sum(len(q) for q in self._entries.values())


@dataclass
class ReplayReport:
    replayed: dict[Key, int] = field(default_factory=dict)
    failures: list[DeadLetter] = field(default_factory=list)


def apply_batch_snapshot(store: CoefficientStore, snapshot: GameModel, snapshot_data_ts: int,
                         replay: ReplayBuffer, config: TrainerConfig) -> ReplayReport:
    """Install a batch-trained snapshot, then replay newer buffered mini-batches."""
    if snapshot_data_ts > store.clock.now_ms:
        raise ValueError("snapshot data timestamp lies in the future")
    store.load_snapshot(snapshot)
    report = ReplayReport()
    n_dead = len(store.dead_letters)
    for batch in replay.batches_after(snapshot_data_ts):
        rtw(store, batch, config)
        report.replayed[batch.key] = report.replayed.get(batch.key, 0) + 1
    report.failures = store.dead_letters[n_dead:]
    return report


def run_stream(instances: Iterable[Instance], store: CoefficientStore,
               assembler: BatchAssembler, config: TrainerConfig,
               replay: ReplayBuffer | None = None, advance_clock: bool = True) -> int:
    """Feed a timestamp-ordered stream through assembler and RTW; returns #updates."""
    n = 0
    for inst in instances:
        if advance_clock and inst.timestamp > store.clock.now_ms:
            store.clock.set(inst.timestamp)
        for batch in assembler.ingest(inst) + assembler.tick():
            rtw(store, batch, config)
            if replay is not None:
                replay.add(batch)
            n += 1
    return n
