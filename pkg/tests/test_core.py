import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfgd.basis import BasisSpec, DomainError, eval_basis_vector
from pfgd.core import (
    CoefficientState,
    EstimatorConfig,
    LearnerBank,
    MiniBatch,
    Mode,
    OnlineQuantileRegressor,
    Sample,
    StreamedPinball,
    align_dimension,
    default_step_constant,
    pinball_loss,
    predict,
    predict_many,
    step_size,
    subgradient_scalar,
    truncation_dim,
    update_batch,
    update_single,
)
from pfgd.projection import l1_project_oracle

SQ2 = math.sqrt(2.0)


def cfg(**kw):
    base = dict(tau=0.5, R=1.0, s=2.0, p=1, A=1.0)
    base.update(kw)
    return EstimatorConfig(**base)


class TestScalars:
    @pytest.mark.parametrize("tau, u, expected", [(0.5, 1.0, 0.5), (0.5, 0.0, 0.0), (0.9, -1.0, 0.1)])
    def test_pinball(self, tau, u, expected):
        assert pinball_loss(tau, u) == pytest.approx(expected, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.001, 0.999), st.floats(-1e6, 1e6))
    def test_pinball_nonnegative(self, tau, u):
        assert pinball_loss(tau, u) >= 0.0

    @pytest.mark.parametrize(
        "tau, y, yhat, expected", [(0.5, 2.0, 1.0, 0.5), (0.9, 0.0, 1.0, -0.1), (0.3, 1.0, 1.0, -0.7)]
    )
    def test_subgradient(self, tau, y, yhat, expected):
        assert subgradient_scalar(tau, y, yhat) == pytest.approx(expected, abs=1e-15)

    def test_step_size_examples(self):
        assert step_size(cfg(A=1.0), 4) == 0.25
        mb = cfg(A=2.0, mode=Mode.MINI_BATCH)
        assert step_size(mb, 3, 10, 100) == pytest.approx(0.2)
        assert step_size(mb, 1, 7, 7) == 2.0
        assert step_size(mb, 1, 7, 7) == step_size(cfg(A=2.0), 1)

    def test_step_size_errors(self):
        with pytest.raises(ValueError):
            step_size(cfg(), 0)
        with pytest.raises(ValueError):
            step_size(cfg(mode=Mode.MINI_BATCH), 2, 5, 3)

    @pytest.mark.parametrize("t, J", [(32, 2), (100, 3), (1, 1), (33, 3), (3125, 5), (3126, 6), (10**5, 10)])
    def test_truncation_examples(self, t, J):
        assert truncation_dim(cfg(s=2.0), t) == J

    def test_truncation_matches_integer_oracle(self):
        # smallest J with J^(2s+1) >= t, computed in exact integers
        c = cfg(s=2.0)
        for t in range(1, 20_000):
            J = 1
            while J**5 < t:
                J += 1
            assert truncation_dim(c, t) == J

    def test_truncation_monotone(self):
        for s in (0.75, 1.0, 1.5, 3.0):
            c = cfg(s=s)
            vals = [truncation_dim(c, t) for t in range(1, 5000)]
            assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_default_A(self):
        assert default_step_constant(0.5) == 4.0
        assert cfg(A=None, tau=0.25).bound == SQ2 * 1.0
        assert EstimatorConfig(tau=0.25, R=1, s=2).A == pytest.approx(1 / (0.25 * 0.75))


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [dict(tau=0.0), dict(tau=1.0), dict(R=0.0), dict(A=-1.0), dict(s=0.5), dict(p=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            cfg(**kw)

    def test_round_trip(self):
        c = cfg(tau=0.3, R=2.5, p=3, mode=Mode.MINI_BATCH)
        assert EstimatorConfig.from_dict(c.to_dict()) == c
        assert EstimatorConfig.from_dict(c.to_dict()).digest() == c.digest()
        assert c.replace(R=3.0).digest() != c.digest()

    def test_frozen(self):
        with pytest.raises(dataclasses.FrozenInstanceError):
            cfg().tau = 0.2


class TestPredict:
    def test_zero_state(self):
        assert predict(CoefficientState.zeros(2, 3), BasisSpec(2), [0.3, 0.9]) == 0.0

    def test_examples(self):
        b = BasisSpec(1)
        assert predict(CoefficientState(np.array([0.0, 1.0]), 1, 1), b, [0.25]) == pytest.approx(SQ2)
        assert predict(CoefficientState(np.array([2.0, 0.0]), 1, 1), b, [0.7]) == pytest.approx(2.0)

    def test_matches_inner_product(self):
        rng = np.random.default_rng(0)
        b = BasisSpec(3)
        st_ = CoefficientState(rng.normal(size=1 + 3 * 7), 3, 7)
        X = rng.random((50, 3))
        many = predict_many(st_, b, X)
        for i in range(50):
            ref = float(st_.theta @ eval_basis_vector(b, 7, X[i]))
            assert predict(st_, b, X[i]) == pytest.approx(ref, abs=1e-12)
            assert many[i] == pytest.approx(ref, abs=1e-12)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            predict(CoefficientState.zeros(1), BasisSpec(1), [1.5])


class TestAlignment:
    def test_noop(self):
        s = CoefficientState(np.array([1.0, 2.0, 3.0]), 1, 2, t=5, N=5)
        out = align_dimension(s, 2)
        np.testing.assert_array_equal(out.theta, s.theta)
        assert (out.J, out.t, out.N) == (2, 5, 5)

    def test_block_preserving(self):
        s = CoefficientState(np.array([1.0, 2.0, 3.0]), 2, 1)
        np.testing.assert_array_equal(align_dimension(s, 2).theta, [1.0, 2.0, 0.0, 3.0, 0.0])

    def test_p1_growth(self):
        s = CoefficientState(np.array([1.0, 2.0]), 1, 1)
        np.testing.assert_array_equal(align_dimension(s, 3).theta, [1.0, 2.0, 0.0, 0.0])

    def test_shrink_rejected(self):
        with pytest.raises(ValueError):
            align_dimension(CoefficientState.zeros(1, 3), 2)

    def test_conservation(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = int(rng.integers(1, 4))
            J = int(rng.integers(1, 6))
            Jn = J + int(rng.integers(0, 6))
            b = BasisSpec(p)
            s = CoefficientState(rng.normal(size=1 + p * J), p, J)
            a = align_dimension(s, Jn)
            assert math.fsum(np.abs(a.theta)) == math.fsum(np.abs(s.theta))
            assert a.l1_norm == pytest.approx(s.l1_norm, abs=1e-12)
            X = rng.random((5, p))
            np.testing.assert_allclose(predict_many(a, b, X), predict_many(s, b, X), atol=1e-12)


class TestUpdateSingle:
    def test_composite_example(self):
        c = cfg()
        out = update_single(CoefficientState.zeros(1), c, Sample([0.25], 5.0))
        assert (out.t, out.N, out.J) == (1, 1, 1)
        # gamma = 1, yhat = 0, s_t = 0.5, pre-projection (0.5, 0.5*sqrt2)
        pre = np.array([0.5, 0.5 * SQ2])
        expected = l1_project_oracle(pre, 1.0)
        np.testing.assert_allclose(out.theta, expected, atol=1e-9)
        np.testing.assert_allclose(out.theta, [0.39644661, 0.60355339], atol=1e-8)

    def test_tie_uses_indicator(self):
        c = cfg(tau=0.3, R=100.0)
        s0 = CoefficientState(np.array([1.0, 0.0]), 1, 1)
        out = update_single(s0, c, Sample([0.0], 1.0))  # yhat = 1 exactly
        # gamma = 1, s_t = -0.7, psi_1(0) = 0
        np.testing.assert_allclose(out.theta, [1.0 - 0.7, 0.0], atol=1e-15)

    def test_interior_step_is_plain_gradient(self):
        c = cfg(R=50.0, A=1.0)
        x = np.array([0.3])
        out = update_single(CoefficientState.zeros(1), c, Sample(x, 2.0))
        np.testing.assert_allclose(out.theta, 0.5 * eval_basis_vector(BasisSpec(1), 1, x))

    def test_invalid_sample_no_mutation(self):
        c = cfg()
        s0 = CoefficientState(np.array([0.1, 0.2]), 1, 1, t=3, N=3)
        before = s0.theta.copy()
        with pytest.raises(ValueError):
            update_single(s0, c, Sample([1.2], 0.0))
        with pytest.raises(ValueError):
            update_single(s0, c, Sample([0.5], float("nan")))
        np.testing.assert_array_equal(s0.theta, before)
        assert s0.t == 3

    def test_mode_mismatch(self):
        with pytest.raises(ValueError):
            update_single(CoefficientState.zeros(1), cfg(mode=Mode.MINI_BATCH), Sample([0.5], 1.0))
        with pytest.raises(ValueError):
            update_batch(CoefficientState.zeros(1), cfg(), MiniBatch([[0.5]], [1.0]))

    def test_schedule_from_post_increment_counter(self):
        c = cfg(s=2.0, R=10.0)
        s = CoefficientState.zeros(1)
        rng = np.random.default_rng(2)
        for t in range(1, 40):
            s = update_single(s, c, Sample(rng.random(1), rng.normal()))
            assert s.J == truncation_dim(c, t)
            assert s.theta.shape == (1 + s.J,)


class TestUpdateBatch:
    def test_size_one_bit_identical(self):
        rng = np.random.default_rng(3)
        cs = cfg(p=2, R=2.0, A=4.0)
        cb = cs.replace(mode=Mode.MINI_BATCH)
        a = CoefficientState.zeros(2)
        b = CoefficientState.zeros(2)
        for _ in range(3000):
            x, y = rng.random(2), rng.normal()
            a = update_single(a, cs, Sample(x, y))
            b = update_batch(b, cb, MiniBatch(x[None, :], [y]))
            assert a.J == b.J and a.t == b.t == b.N
            np.testing.assert_array_equal(a.theta, b.theta)

    def test_copies_match_single_sample_batch(self):
        # first batch from a J=3 state: gamma = A*n/N = A and J stays 3 for both
        cb = cfg(mode=Mode.MINI_BATCH, R=3.0)
        s0 = CoefficientState(np.array([0.1, 0.2, -0.3, 0.05]), 1, 3)
        one = update_batch(s0, cb, MiniBatch([[0.4]], [1.0]))
        many = update_batch(s0, cb, MiniBatch([[0.4]] * 6, [1.0] * 6))
        assert one.J == many.J == 3
        np.testing.assert_allclose(many.theta, one.theta, atol=1e-15)

    def test_mixed_indicators(self):
        tau = 0.3
        cb = cfg(mode=Mode.MINI_BATCH, R=100.0, tau=tau, A=1.0)
        s0 = CoefficientState(np.array([1.0, 0.0, 0.0]), 1, 2)
        x = [0.2]
        out = update_batch(s0, cb, MiniBatch([x, x], [2.0, 0.0]))
        psi = eval_basis_vector(BasisSpec(1), 2, np.array(x))
        # gamma = A * 2 / 2 = 1 ; G = (tau - 1/2) psi
        np.testing.assert_allclose(out.theta, s0.theta + (tau - 0.5) * psi, atol=1e-15)

    def test_batch_uses_pre_update_predictor(self):
        cb = cfg(mode=Mode.MINI_BATCH, R=100.0, A=1.0)
        out = update_batch(CoefficientState.zeros(1, 2), cb, MiniBatch([[0.0], [0.0]], [0.5, 0.5]))
        # both residuals judged against yhat = 0 -> s = +0.5 for both
        assert out.theta[0] == pytest.approx(0.5)


class TestStreamedPinball:
    def test_empty(self):
        assert StreamedPinball(0.5).mean is None

    def test_one_sample(self):
        m = OnlineQuantileRegressor(cfg()).partial_fit([0.9], 1.0)
        assert m.loss.mean == 0.5

    def test_constant_stream(self):
        m = OnlineQuantileRegressor(cfg(R=5.0, A=4.0))
        means = []
        for i in range(4000):
            m.partial_fit([0.5], 1.0)
            means.append(m.loss.mean)
        assert abs(means[-1] - means[-2]) < 1e-5
        assert means[-1] < means[10]


class TestInvariants:
    def test_feasibility_and_supnorm_fuzz(self):
        rng = np.random.default_rng(11)
        grid = np.linspace(0, 1, 1000)
        for trial in range(10):
            p = int(rng.integers(1, 4))
            c = EstimatorConfig(
                tau=float(rng.uniform(0.05, 0.95)), R=float(rng.uniform(0.2, 3)),
                s=float(rng.uniform(0.6, 3)), p=p, A=float(rng.uniform(0.5, 20)),
            )
            s = CoefficientState.zeros(p)
            for i in range(1000):
                y = float(rng.standard_cauchy() * rng.uniform(0.1, 10))
                s = update_single(s, c, Sample(rng.random(p), y))
                assert s.l1_norm <= c.R + 1e-9
                if i % 100 == 99:
                    G = np.repeat(grid[:, None], p, axis=1)
                    assert np.abs(predict_many(s, c.basis, G)).max() <= c.bound + 1e-6

    def test_degeneracy_long_run(self):
        rng = np.random.default_rng(12)
        cs = cfg(p=3, R=1.5, tau=0.8, A=None)
        bank_s = LearnerBank(cs, 1)
        bank_b = LearnerBank(cs.replace(mode=Mode.MINI_BATCH), 1)
        for _ in range(5000):
            X = rng.random((1, 1, 3))
            Y = rng.normal(size=(1, 1))
            bank_s.step(X, Y)
            bank_b.step(X, Y)
        np.testing.assert_array_equal(bank_s.theta, bank_b.theta)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            m = OnlineQuantileRegressor(cfg(p=2, R=2.0))
            traj = []
            for _ in range(500):
                m.partial_fit(rng.random(2), rng.normal())
                traj.append(m.state.theta.copy())
            return traj

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)

    def test_bank_rows_equal_lone_learners(self):
        rng = np.random.default_rng(6)
        c = cfg(p=2, R=1.0, A=3.0)
        L = 5
        bank = LearnerBank(c, L)
        lone = [CoefficientState.zeros(2) for _ in range(L)]
        for _ in range(800):
            X = rng.random((L, 1, 2))
            Y = rng.normal(size=(L, 1))
            bank.step(X, Y)
            lone = [update_single(s, c, Sample(X[i, 0], Y[i, 0])) for i, s in enumerate(lone)]
        for i in range(L):
            np.testing.assert_array_equal(bank.state(i).theta, lone[i].theta)

    def test_memory_is_state_sized(self):
        c = cfg(p=2, R=2.0, s=1.0)
        m = OnlineQuantileRegressor(c)
        rng = np.random.default_rng(7)
        for _ in range(20_000):
            m.partial_fit(rng.random(2), rng.normal())
        s = m.state
        assert s.theta.shape == (1 + 2 * s.J,)
        arrays = [v for v in vars(s).values() if isinstance(v, np.ndarray)]
        assert sum(a.size for a in arrays) == 1 + 2 * s.J
        assert sorted(vars(m.loss)) == ["count", "tau", "total"]

    @pytest.mark.slow
    def test_descent_sanity(self):
        # median over 20 seeds of |theta_0 - c| after 10^5 steps
        c0 = 0.7
        cfgd = cfg(tau=0.5, R=2.0, A=None)
        L, T = 20, 100_000
        bank = LearnerBank(cfgd, L)
        rngs = [np.random.default_rng(100 + i) for i in range(L)]
        chunk = 5000
        for start in range(0, T, chunk):
            X = np.stack([r.random((chunk, 1)) for r in rngs], axis=1)
            E = np.stack([r.laplace(0, 0.5, chunk) for r in rngs], axis=1)
            for k in range(chunk):
                bank.step(X[k][:, None, :], (c0 + E[k])[:, None])
        errs = np.abs(bank.theta[:, 0] - c0)
        assert np.median(errs) < 0.05
