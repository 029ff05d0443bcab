"""Thompson sampling from random-effect posteriors."""
from __future__ import annotations

import hashlib

import numpy as np

from .incremental import posterior_covariance
from .model import CoefficientState, Instance, dot, fixed_score


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(global_seed: int, *keys) -> int:
    """Stable 64-bit seed for a named sub-stream, e.g. (seed, entity, request)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(global_seed)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")


def covariance_factor(state: CoefficientState) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L L^T = (H + lam*I)^{-1}``.

    In diagonal mode the factor is returned as a vector of standard deviations.
    """
    cov = posterior_covariance(state)
    if cov.ndim == 1:
        return np.sqrt(cov)
    return np.linalg.cholesky(cov)


def thompson_sample(state: CoefficientState, rng_seed: int) -> np.ndarray:
    """One draw from ``N(mean, (H + lam*I)^{-1})``, deterministic in ``rng_seed``."""
    eps = make_rng(rng_seed).standard_normal(state.dim)
    L = covariance_factor(state)
    return state.mean + (L * eps if L.ndim == 1 else L @ eps)


def sampled_score(model, inst: Instance, rng_seed: int) -> float:
    """Fixed-effect point score plus sampled random-effect contributions.

    Each assigned entity gets its own sub-stream derived from ``rng_seed`` and
    the entity key, so one request draws once per entity.
    """
    s = fixed_score(model, inst)
    for a in inst.re_assignments:
        st = model.state(a.re_type, a.re_id)
        beta = thompson_sample(st, derive_seed(rng_seed, a.re_type, a.re_id))
        s += dot(a.features, beta)
    return s
