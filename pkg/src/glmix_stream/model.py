"""Core value types for mixed-effect models on data streams.

A model is a stationary fixed-effect coefficient vector plus a keyed
collection of per-entity random-effect posteriors.  Features are sparse
``index -> value`` maps; the fixed-effect and random-effect index spaces are
independent.

Hessian stores are plain numpy arrays: a 2-D ``(d, d)`` array in ``"full"``
mode and a 1-D length-``d`` array in ``"diagonal"`` mode.  They hold the data
curvature only; the prior precision ``lam`` is added when a posterior is
needed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping

import numpy as np

HESSIAN_MODES = ("full", "diagonal")
PRIOR_FORMS = ("anchored", "plain")


class DimensionMismatchError(ValueError):
    """A feature index falls outside the declared dimension."""


class SchemaError(ValueError):
    """Malformed instance, snapshot, or schema."""


class SparseVector:
    """Canonical sparse vector: strictly increasing indices, no stored zeros.

    Duplicate indices in the input are summed.
    """

    __slots__ = ("indices", "values")

    def __init__(self, indices: Iterable[int] = (), values: Iterable[float] = ()):
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        val = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-D and equally long")
        if idx.size and idx.min() < 0:
            raise ValueError("feature indices must be non-negative")
        if idx.size and not np.all(np.diff(idx) > 0):
            uniq, inverse = np.unique(idx, return_inverse=True)
            summed = np.zeros(uniq.size)
            np.add.at(summed, inverse, val)
            idx, val = uniq, summed
        keep = val != 0.0
        self.indices = idx[keep]
        self.values = val[keep]
        self.indices.flags.writeable = False
        self.values.flags.writeable = False

    @classmethod
    def from_dict(cls, entries: Mapping) -> "SparseVector":
        items = [(int(k), float(v)) for k, v in entries.items()]
        return cls([k for k, _ in items], [v for _, v in items])

    @classmethod
    def from_dense(cls, dense) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64)
        nz = np.flatnonzero(dense)
        return cls(nz, dense[nz])

    def to_dict(self) -> dict[str, float]:
        return {str(int(i)): float(v) for i, v in zip(self.indices, self.values)}

    def to_dense(self, dim: int) -> np.ndarray:
        if self.indices.size and self.indices[-1] >= dim:
            raise DimensionMismatchError(
                f"feature index {int(self.indices[-1])} out of range for dimension {dim}")
        out = np.zeros(dim)
        out[self.indices] = self.values
        return out

    @property
    def max_index(self) -> int:
        return int(self.indices[-1]) if self.indices.size else -1

    def __len__(self) -> int:
        return int(self.indices.size)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return ((int(i), float(v)) for i, v in zip(self.indices, self.values))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"SparseVector({dict(self)})"


def dot(v: SparseVector, w) -> float:
    """Inner product of a sparse vector with a dense vector."""
    w = np.asarray(w, dtype=np.float64)
    if v.max_index >= w.shape[0]:
        raise DimensionMismatchError(
            f"feature index {v.max_index} out of range for dimension {w.shape[0]}")
    if not len(v):
        return 0.0
    return float(np.dot(v.values, w[v.indices]))


@dataclass(frozen=True)
class Assignment:
    re_type: str
    re_id: str
    features: SparseVector


@dataclass(frozen=True)
class Instance:
    """One labeled observation with its random-effect assignments."""

    timestamp: int
    label: int
    fixed_features: SparseVector
    re_assignments: tuple[Assignment, ...] = ()

    def __post_init__(self):
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label!r}")
        types = [a.re_type for a in self.re_assignments]
        if len(set(types)) != len(types):
            raise SchemaError(f"duplicate random-effect type in {types}")
        if not isinstance(self.re_assignments, tuple):
            object.__setattr__(self, "re_assignments", tuple(self.re_assignments))

    def assignment(self, re_type: str) -> Assignment | None:
        for a in self.re_assignments:
            if a.re_type == re_type:
                return a
        return None

    def to_json(self) -> str:
        obj = {
            "ts": int(self.timestamp),
            "label": int(self.label),
            "x": self.fixed_features.to_dict(),
            "re": [{"type": a.re_type, "id": a.re_id, "z": a.features.to_dict()}
                   for a in self.re_assignments],
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str | Mapping) -> "Instance":
        obj = json.loads(line) if isinstance(line, str) else line
        try:
            return cls(
                timestamp=int(obj["ts"]),
                label=int(obj["label"]),
                fixed_features=SparseVector.from_dict(obj.get("x", {})),
                re_assignments=tuple(
                    Assignment(str(r["type"]), str(r["id"]), SparseVector.from_dict(r.get("z", {})))
                    for r in obj.get("re", [])),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed instance: {exc}") from exc


def read_instances(path) -> list[Instance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Instance.from_json(line))
            except (ValueError, SchemaError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_instances(path, instances: Iterable[Instance]) -> int:
    n = 0
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json())
            fh.write("\n")
            n += 1
    return n


@dataclass(frozen=True)
class MiniBatch:
    """Instances of one entity collected between two update triggers."""

    re_type: str
    re_id: str
    instances: tuple[Instance, ...]
    batch_seq: int = 0

    def __post_init__(self):
        insts = tuple(sorted(self.instances, key=lambda i: i.timestamp))
        object.__setattr__(self, "instances", insts)
        for inst in insts:
            a = inst.assignment(self.re_type)
            if a is None or a.re_id != self.re_id:
                raise SchemaError(
                    f"instance at ts={inst.timestamp} is not assigned to "
                    f"({self.re_type!r}, {self.re_id!r})")

    @property
    def key(self) -> tuple[str, str]:
        return (self.re_type, self.re_id)

    @property
    def timestamp(self) -> int:
        return self.instances[-1].timestamp if self.instances else 0

    def __len__(self) -> int:
        return len(self.instances)


def zero_hessian(dim: int, mode: str) -> np.ndarray:
    if mode == "full":
        return np.zeros((dim, dim))
    if mode == "diagonal":
        return np.zeros(dim)
    raise ValueError(f"unknown hessian mode {mode!r}")


def hessian_mode_of(hessian: np.ndarray) -> str:
    return "full" if hessian.ndim == 2 else "diagonal"


@dataclass(frozen=True)
class CoefficientState:
    """Posterior of one random effect: mean, data Hessian, prior precision."""

    mean: np.ndarray
    hessian: np.ndarray
    lam: float
    version: int = 0
    last_update_ts: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        d = self.mean.shape[0]
        if self.hessian.shape not in ((d,), (d, d)):
            raise DimensionMismatchError(
                f"hessian shape {self.hessian.shape} does not match mean dimension {d}")

    @classmethod
    def prior(cls, dim: int, lam: float, mode: str = "full") -> "CoefficientState":
        return cls(np.zeros(dim), zero_hessian(dim, mode), float(lam))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def hessian_mode(self) -> str:
        return hessian_mode_of(self.hessian)

    def precision_diagonal(self) -> np.ndarray:
        h = np.diag(self.hessian) if self.hessian.ndim == 2 else self.hessian
        return h + self.lam

    def same_values(self, other: "CoefficientState") -> bool:
        """Bitwise equality of mean, Hessian, lam and version."""
        return (np.array_equal(self.mean, other.mean)
                and np.array_equal(self.hessian, other.hessian)
                and self.lam == other.lam and self.version == other.version)

    def to_dict(self) -> dict:
        if self.hessian.ndim == 2:
            rows, cols = np.tril_indices(self.dim)
            packed = self.hessian[rows, cols]
        else:
            packed = self.hessian
        return {
            "hessian_mode": self.hessian_mode,
            "mean": [float(v) for v in self.mean],
            "hessian": [float(v) for v in packed],
            "lambda": float(self.lam),
            "version": int(self.version),
            "last_update_ts": int(self.last_update_ts),
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "CoefficientState":
        mean = np.asarray(obj["mean"], dtype=np.float64)
        packed = np.asarray(obj["hessian"], dtype=np.float64)
        d = mean.shape[0]
        if obj["hessian_mode"] == "full":
            if packed.shape[0] != d * (d + 1) // 2:
                raise SchemaError("packed lower triangle has wrong length")
            hess = np.zeros((d, d))
            rows, cols = np.tril_indices(d)
            hess[rows, cols] = packed
            hess[cols, rows] = packed
        elif obj["hessian_mode"] == "diagonal":
            hess = packed
        else:
            raise SchemaError(f"unknown hessian_mode {obj['hessian_mode']!r}")
        return cls(mean, hess, float(obj["lambda"]), int(obj.get("version", 0)),
                   int(obj.get("last_update_ts", 0)))


@dataclass(frozen=True)
class TrainerConfig:
    """Solver and prior settings shared by batch and incremental training.

    ``prior_form`` selects how the discounted quadratic of past loss is
    combined with the N(0, 1/lam) base prior:

    * ``"anchored"`` (default): the quadratic uses ``H + lam*I`` and the base
      prior weight is ``(1 - delta) * lam``, so total regularization stays
      ``lam`` and the update is a consistent second-order approximation of
      the discounted cumulative objective.
    * ``"plain"``: the quadratic uses ``H`` and the base prior ``lam`` is
      added afresh at every step.

    Both forms give the same posterior precision ``H + lam*I`` after an update
    and coincide whenever the previous mean is zero or ``lam`` is zero.
    """

    delta: float = 0.95
    lam: float = 1.0
    hessian_mode: str = "full"
    solver_tol: float = 1e-8
    solver_max_iter: int = 100
    prior_form: str = "anchored"
    lam_by_type: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not self.solver_tol > 0:
            raise ValueError("solver_tol must be positive")
        if self.solver_max_iter < 1:
            raise ValueError("solver_max_iter must be a positive integer")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValueError(f"hessian_mode must be one of {HESSIAN_MODES}")
        if self.prior_form not in PRIOR_FORMS:
            raise ValueError(f"prior_form must be one of {PRIOR_FORMS}")

    def lam_for(self, re_type: str) -> float:
        return float(self.lam_by_type.get(re_type, self.lam))

    def replace(self, **changes) -> "TrainerConfig":
        return replace(self, **changes)


@dataclass
class GameModel:
    """Fixed-effect coefficients plus per-entity random-effect posteriors.

    ``re_dims`` is the schema: declared feature dimension per random-effect
    type.  Entities without a stored state score as zero and resolve to the
    prior state ``N(0, 1/lam)`` on first access through :meth:`state`.
    """

    fixed_coeffs: np.ndarray
    re_dims: dict[str, int]
    random_effects: dict[tuple[str, str], CoefficientState] = field(default_factory=dict)
    lam: float = 1.0
    hessian_mode: str = "full"
    lam_by_type: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fixed_coeffs = np.asarray(self.fixed_coeffs, dtype=np.float64)
        self.fixed_coeffs.flags.writeable = False
        for (r, _), st in self.random_effects.items():
            self._check_dim(r, st)

    def _check_dim(self, re_type, st):
        if re_type not in self.re_dims:
            raise SchemaError(f"undeclared random-effect type {re_type!r}")
        if st.dim != self.re_dims[re_type]:
            raise DimensionMismatchError(
                f"state dimension {st.dim} != declared {self.re_dims[re_type]} for {re_type!r}")

    def lam_for(self, re_type: str) -> float:
        return float(self.lam_by_type.get(re_type, self.lam))

    def state(self, re_type: str, re_id: str) -> CoefficientState:
        st = self.random_effects.get((re_type, re_id))
        if st is None:
            if re_type not in self.re_dims:
                raise SchemaError(f"undeclared random-effect type {re_type!r}")
            st = CoefficientState.prior(self.re_dims[re_type], self.lam_for(re_type), self.hessian_mode)
        return st

    def mean_of(self, re_type: str, re_id: str) -> np.ndarray | None:
        st = self.random_effects.get((re_type, re_id))
        return None if st is None else st.mean

    def set_state(self, re_type: str, re_id: str, st: CoefficientState) -> None:
        self._check_dim(re_type, st)
        self.random_effects[(re_type, re_id)] = st

    def copy(self) -> "GameModel":
        return GameModel(self.fixed_coeffs, dict(self.re_dims), dict(self.random_effects),
                         self.lam, self.hessian_mode, dict(self.lam_by_type), dict(self.metadata))

    def to_dict(self) -> dict:
        return {
            "format": "glmix-snapshot/1",
            "hessian_mode": self.hessian_mode,
            "lambda": float(self.lam),
            "lambda_by_type": {k: float(v) for k, v in sorted(self.lam_by_type.items())},
            "fixed_coeffs": [float(v) for v in self.fixed_coeffs],
            "re_dims": {k: int(v) for k, v in sorted(self.re_dims.items())},
            "random_effects": [
                {"type": r, "id": l, **st.to_dict()}
                for (r, l), st in sorted(self.random_effects.items())
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "GameModel":
        try:
            res = {(e["type"], e["id"]): CoefficientState.from_dict(e) for e in obj["random_effects"]}
            return cls(np.asarray(obj["fixed_coeffs"], dtype=np.float64),
                       {k: int(v) for k, v in obj["re_dims"].items()},
                       res, float(obj["lambda"]), obj["hessian_mode"],
                       dict(obj.get("lambda_by_type", {})), dict(obj.get("metadata", {})))
        except KeyError as exc:
            raise SchemaError(f"snapshot missing field {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GameModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GameModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def fixed_score(model, inst: Instance) -> float:
    return dot(inst.fixed_features, model.fixed_coeffs)


def re_contribution(model, inst: Instance, re_type: str) -> float:
    """Score contribution of one random-effect type (0 for unseen entities)."""
    a = inst.assignment(re_type)
    if a is None:
        return 0.0
    if re_type not in model.re_dims:
        raise SchemaError(f"undeclared random-effect type {re_type!r}")
    mean = model.mean_of(re_type, a.re_id)
    if mean is None:
        if a.features.max_index >= model.re_dims[re_type]:
            raise DimensionMismatchError(
                f"feature index {a.features.max_index} out of range for {re_type!r}")
        return 0.0
    return dot(a.features, mean)


def score(model, inst: Instance) -> float:
    """Fixed-effect score plus every assigned random effect's contribution."""
    s = fixed_score(model, inst)
    for a in inst.re_assignments:
        s += re_contribution(model, inst, a.re_type)
    return s
