"""Incremental training of mixed-effect logistic models on data streams.

A batch-trained model (a global fixed effect plus per-entity random effects)
is kept fresh by updating each entity's random effect from mini-batches,
using the previous posterior as the prior for the next update.
"""
from .model import (Assignment, CoefficientState, DimensionMismatchError, GameModel, Instance,
                    MiniBatch, SchemaError, SparseVector, TrainerConfig, dot, fixed_score,
                    re_contribution, read_instances, score, write_instances)
from .loss import OffsetInstance, curvature_weights, grad, hessian_contrib, logloss, sigmoid
from .solver import (SolverError, fit_random_effects, per_entity_solve, retrain_random_effects,
                     train_batch)
from .incremental import (CovarianceError, IncrementalUpdateResult,
                          chained_update_equivalence_check, incremental_update,
                          posterior_covariance)
from .sampler import derive_seed, make_rng, sampled_score, thompson_sample
from .stream import (BatchAssembler, CoefficientStore, ReplayBuffer, SimClock, StaleWriteError,
                     TriggerPolicy, apply_batch_snapshot, compute_offsets, rtw, run_stream)
from .datasets import (DataError, als_factorize, binarize, compress_time, prepare_movielens,
                       surrogate_ratings, synth_drift_stream)
from .evaluation import (EvalConfig, EvalResult, auc, decay_experiment, delta_sweep, plan_variant,
                         run_eval, theorem_gap_check, theorem_suite)

__version__ = "0.1.0"
