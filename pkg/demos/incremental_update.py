"""
Incremental updates for one entity
==================================

A single entity's coefficients are refined one mini-batch at a time.  Each
step is anchored to the previous estimate through its accumulated curvature,
so older batches are never revisited.
"""

import numpy as np

from glmix_stream.incremental import incremental_update, posterior_covariance
from glmix_stream.loss import OffsetInstance
from glmix_stream.model import CoefficientState, SparseVector, TrainerConfig
from glmix_stream.sampler import thompson_sample

rng = np.random.default_rng(0)
truth = np.array([1.0, -0.5])


def batch(n):
    z = rng.standard_normal((n, 2))
    y = (rng.random(n) < 1 / (1 + np.exp(-z @ truth))).astype(int)
    return [OffsetInstance(0.0, SparseVector.from_dense(zi), int(yi)) for zi, yi in zip(z, y)]


###############################################################################
# Start from the ridge prior and feed twenty batches of ten examples.  The
# mean walks towards the truth and the posterior covariance shrinks.

cfg = TrainerConfig(delta=1.0, lam=1.0)
state = CoefficientState.prior(2, 1.0)
for t in range(20):
    state = incremental_update(state, batch(10), cfg).state
    if t % 5 == 4:
        sd = np.sqrt(np.diag(posterior_covariance(state)))
        print(f"after {t + 1:2d} batches  mean={np.round(state.mean, 3)}  sd={np.round(sd, 3)}")

###############################################################################
# With a forgetting factor below one the old curvature decays, so the
# covariance stops shrinking and settles at a level set by the batch rate.

forgetful = CoefficientState.prior(2, 1.0)
for t in range(20):
    forgetful = incremental_update(forgetful, batch(10), TrainerConfig(delta=0.8, lam=1.0)).state
print("sd with delta=1.0:", np.round(np.sqrt(np.diag(posterior_covariance(state))), 3))
print("sd with delta=0.8:", np.round(np.sqrt(np.diag(posterior_covariance(forgetful))), 3))

###############################################################################
# Thompson sampling draws coefficients from that posterior.  A draw is fixed
# by its seed, so serving can be replayed exactly.

draws = np.array([thompson_sample(forgetful, seed) for seed in range(2000)])
print("sample mean:", np.round(draws.mean(axis=0), 3), " posterior mean:", np.round(forgetful.mean, 3))
