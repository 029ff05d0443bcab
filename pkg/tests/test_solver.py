import numpy as np
import pytest
from scipy.optimize import brentq, minimize_scalar
from scipy.special import expit

from glmix_stream.loss import OffsetInstance, logloss
from glmix_stream.model import Instance, SparseVector, TrainerConfig, score
from glmix_stream.solver import (Design, SolverError, objective_gradient, objective_value,
                                 per_entity_solve, retrain_random_effects, train_batch)

from conftest import make_instance, random_offset_batch, two_type_stream

# root of 2b + sigmoid(b) - 1 = 0 (brentq, xtol 1e-15), frozen
PRIOR_ONE_STEP = 0.22232347127832916
# minimizer of 10*BCE(7 positives) + b^2/2, i.e. root of 10 sigmoid(b) - 7 + b = 0, frozen
SCALAR_BATCH_OPT = 0.582825971698253


class TestOracles:
    """The frozen constants against independent scalar solves."""

    def test_prior_one_step(self):
        root = brentq(lambda b: 2 * b + expit(b) - 1, -1, 1, xtol=1e-15)
        np.testing.assert_allclose(root, PRIOR_ONE_STEP, atol=1e-14)

    def test_scalar_batch(self):
        def f(b):
            return 7 * np.logaddexp(0, -b) + 3 * np.logaddexp(0, b) + 0.5 * b * b
        grid = np.linspace(-3, 3, 6001)
        b0 = grid[np.argmin([f(b) for b in grid])]
        for _ in range(20):
            p = expit(b0)
            b0 -= (10 * p - 7 + b0) / (10 * p * (1 - p) + 1)
        np.testing.assert_allclose(b0, SCALAR_BATCH_OPT, atol=1e-12)
        res = minimize_scalar(f, bracket=(-1, 0, 2), tol=1e-12)
        np.testing.assert_allclose(res.x, SCALAR_BATCH_OPT, atol=1e-6)


class TestPerEntitySolve:
    cfg = TrainerConfig(solver_tol=1e-12)

    def test_empty_batch_returns_prior_center(self):
        m = np.array([0.3, -1.2])
        beta, H = per_entity_solve([], m, np.eye(2), 1.0, 0.0, self.cfg)
        np.testing.assert_array_equal(beta, m)
        assert not H.any()

    def test_empty_batch_zero_prior(self):
        beta, _ = per_entity_solve([], np.zeros(3), np.eye(3), 1.0, 2.0, self.cfg)
        np.testing.assert_array_equal(beta, np.zeros(3))

    def test_one_instance_with_prior(self):
        b = [OffsetInstance(0.0, SparseVector([0], [1.0]), 1)]
        beta, _ = per_entity_solve(b, np.zeros(1), np.array([[1.0]]), 1.0, 1.0, self.cfg)
        np.testing.assert_allclose(beta, [PRIOR_ONE_STEP], atol=1e-6)

    def test_gradient_norm_at_solution(self, rng):
        for mode in ("full", "diagonal"):
            cfg = TrainerConfig(hessian_mode=mode)
            for _ in range(20):
                d = int(rng.integers(1, 6))
                b = random_offset_batch(rng, int(rng.integers(0, 30)), d)
                m = rng.standard_normal(d)
                A = rng.standard_normal((d, d))
                P = A @ A.T if mode == "full" else rng.random(d)
                beta, _ = per_entity_solve(b, m, P, 0.9, 0.5, cfg)
                assert np.linalg.norm(objective_gradient(b, beta, m, P, 0.9, 0.5)) <= cfg.solver_tol

    def test_unique_from_different_starts(self, rng):
        cfg = TrainerConfig()
        b = random_offset_batch(rng, 25, 3)
        P = np.eye(3)
        b1, _ = per_entity_solve(b, np.zeros(3), P, 0.5, 1.0, cfg)
        b2, _ = per_entity_solve(b, np.zeros(3), P, 0.5, 1.0, cfg, start=5 * rng.standard_normal(3))
        assert np.linalg.norm(b1 - b2) <= 10 * cfg.solver_tol

    def test_full_and_diagonal_agree_on_one_hot(self, rng):
        batch = []
        for _ in range(60):
            j = int(rng.integers(4))
            batch.append(OffsetInstance(float(rng.standard_normal()), SparseVector([j], [1.0]),
                                        int(rng.random() < 0.3 + 0.1 * j)))
        P = rng.random(4) + 0.1
        full, _ = per_entity_solve(batch, np.zeros(4), np.diag(P), 0.8, 1.0, TrainerConfig())
        diag, _ = per_entity_solve(batch, np.zeros(4), P, 0.8, 1.0,
                                   TrainerConfig(hessian_mode="diagonal"))
        np.testing.assert_allclose(full, diag, atol=1e-5)

    def test_hessian_store_mode_follows_prior(self, rng):
        b = random_offset_batch(rng, 5, 3)
        _, H = per_entity_solve(b, np.zeros(3), np.zeros(3), 0.0, 1.0, TrainerConfig())
        assert H.shape == (3,)

    def test_nonconvergence_reports_iterate(self, rng):
        b = random_offset_batch(rng, 30, 3)
        cfg = TrainerConfig(solver_max_iter=1, solver_tol=1e-14)
        with pytest.raises(SolverError) as exc:
            per_entity_solve(b, np.zeros(3), np.eye(3), 1.0, 1.0, cfg)
        assert exc.value.last_iterate is not None
        assert exc.value.grad_norm > 1e-14

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            per_entity_solve([], np.zeros(1), np.eye(1), -1.0, 1.0, TrainerConfig())

    def test_objective_value_definition(self, rng):
        b = random_offset_batch(rng, 10, 2)
        beta, m, P = rng.standard_normal(2), rng.standard_normal(2), np.array([[2.0, 0.5], [0.5, 1.0]])
        r = beta - m
        expect = 0.35 * r @ P @ r + logloss(b, beta) + 0.25 * beta @ beta
        np.testing.assert_allclose(objective_value(b, beta, m, P, 0.7, 0.5), expect, rtol=1e-13)


class TestTrainBatch:
    def test_scalar_fixed_only(self):
        data = [make_instance(k, int(k < 7), {0: 1.0}) for k in range(10)]
        m = train_batch(data, TrainerConfig(lam=1.0), rounds=1)
        np.testing.assert_allclose(m.fixed_coeffs, [SCALAR_BATCH_OPT], atol=1e-4)

    def test_all_negative_labels(self, rng):
        data = [make_instance(k, 0, {0: 1.0, 1: float(rng.random())},
                              [("user", str(k % 3), {0: 1.0})]) for k in range(30)]
        hist = []
        m = train_batch(data, TrainerConfig(), rounds=1, history=hist)
        assert np.all(m.fixed_coeffs <= 0)
        for st in m.random_effects.values():
            assert np.all(st.mean <= 0)
        zero_obj = len(data) * np.log(2.0)
        assert hist[0] < zero_obj

    @pytest.mark.parametrize("rounds", [0, -1])
    def test_rounds_must_be_positive(self, rounds):
        with pytest.raises(ValueError):
            train_batch([make_instance(0, 1, {0: 1.0})], TrainerConfig(), rounds=rounds)

    def test_empty_data(self):
        with pytest.raises(ValueError):
            train_batch([], TrainerConfig())

    def test_objective_non_increasing(self, rng):
        data = two_type_stream(rng, n=400)
        hist = []
        train_batch(data, TrainerConfig(), rounds=6, history=hist)
        assert all(b <= a + 1e-8 for a, b in zip(hist, hist[1:]))

    def test_final_hessian_is_group_curvature(self, rng):
        data = two_type_stream(rng, n=200)
        m = train_batch(data, TrainerConfig(), rounds=2)
        key = ("user", "1")
        rows = [i for i in data if i.assignment("user").re_id == "1"]
        st = m.random_effects[key]
        z = np.array([i.assignment("user").features.to_dense(2) for i in rows])
        s = np.array([score(m, i) for i in rows])
        w = expit(s) * (1 - expit(s))
        np.testing.assert_allclose(st.hessian, (z.T * w) @ z, rtol=1e-10, atol=1e-14)

    def test_deterministic(self, rng):
        data = two_type_stream(rng, n=200)
        a = train_batch(data, TrainerConfig(), rounds=2)
        b = train_batch(data, TrainerConfig(), rounds=2)
        assert a.to_json() == b.to_json()

    def test_per_type_lambda(self, rng):
        data = two_type_stream(rng, n=200)
        m = train_batch(data, TrainerConfig(lam_by_type={"ad": 1e6}), rounds=2)
        for (r, _), st in m.random_effects.items():
            if r == "ad":
                assert np.abs(st.mean).max() < 1e-3
                assert st.lam == 1e6

    def test_diagonal_mode_stores_diagonal(self, rng):
        data = two_type_stream(rng, n=100)
        full = train_batch(data, TrainerConfig(), rounds=1)
        diag = train_batch(data, TrainerConfig(hessian_mode="diagonal"), rounds=1)
        for k, st in diag.random_effects.items():
            assert st.hessian.ndim == 1
            np.testing.assert_array_equal(st.mean, full.random_effects[k].mean)


class TestRetrain:
    def test_holds_fixed_effect(self, rng):
        data = two_type_stream(rng, n=300)
        base = train_batch(data[:150], TrainerConfig(), rounds=2)
        re = retrain_random_effects(base, data, TrainerConfig(), rounds=2)
        np.testing.assert_array_equal(re.fixed_coeffs, base.fixed_coeffs)

    def test_warm_start_does_not_change_solution(self, rng):
        data = [Instance(i.timestamp, i.label, i.fixed_features, i.re_assignments[:1])
                for i in two_type_stream(rng, n=300)]
        base = train_batch(data[:150], TrainerConfig(), rounds=2)
        cold = retrain_random_effects(base, data, TrainerConfig(), rounds=3)
        warm = retrain_random_effects(base, data, TrainerConfig(), rounds=3, warm_start=cold)
        for k in cold.random_effects:
            np.testing.assert_allclose(warm.random_effects[k].mean, cold.random_effects[k].mean,
                                       atol=1e-7)

    def test_design_head_matches_prefix(self, rng):
        data = two_type_stream(rng, n=120)
        full = Design(data, 2, {"user": 2, "ad": 2})
        head = full.head(70)
        direct = Design(data[:70], 2, {"user": 2, "ad": 2})
        np.testing.assert_array_equal(head.X, direct.X)
        for r in direct.groups:
            assert [g.re_id for g in head.groups[r]] == [g.re_id for g in direct.groups[r]]
            for gh, gd in zip(head.groups[r], direct.groups[r]):
                np.testing.assert_array_equal(gh.rows, gd.rows)
                np.testing.assert_array_equal(gh.Z, gd.Z)
