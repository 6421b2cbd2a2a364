import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmloc import filters
from gmloc.filters import (
    GsfBelief,
    MotionParams,
    StateBelief,
    UkfParams,
    gsf_condense,
    gsf_predict,
    gsf_update,
    initial_belief,
    motion_model,
    observe,
    sigma_weights,
    spf_update_gm,
    ukf_predict,
    ukf_update,
    wrap_angle,
)
from gmloc.mixture import GaussMix2, rotate_to_inertial
from oracles import grid_tv, kf_predict, kf_update, linear_F, random_belief, spd


class TestWrap:
    @pytest.mark.parametrize("a, w", [(np.pi, np.pi), (-np.pi, np.pi), (3 * np.pi, np.pi), (0.5, 0.5), (-7.0, -7.0 + 2 * np.pi)])
    def test_values(self, a, w):
        assert wrap_angle(a) == pytest.approx(w, abs=1e-12)

    @given(st.floats(-1e3, 1e3))
    def test_range(self, a):
        w = wrap_angle(a)
        assert -np.pi < w <= np.pi
        assert np.isclose(np.cos(w), np.cos(a), atol=1e-9) and np.isclose(np.sin(w), np.sin(a), atol=1e-9)


class TestMotion:
    def test_rest(self):
        s = np.array([1.0, 2.0, 0.3, 0.0, 0.0])
        np.testing.assert_allclose(motion_model(s, 0.5), s, rtol=0, atol=1e-15)

    def test_straight_line(self):
        np.testing.assert_allclose(motion_model([0, 0, 0, 1, 0], 1.0), [1, 0, 0, 1, 0])

    def test_turning(self):
        np.testing.assert_allclose(motion_model([0, 0, 0, 1, np.pi / 2], 1.0), [1, 0, np.pi / 2, 1, np.pi / 2])

    def test_heading_wrap(self):
        s = motion_model([0, 0, np.pi - 0.01, 1.0, 0.02], 1.0)
        assert s[2] == pytest.approx(-np.pi + 0.01, abs=1e-12)

    def test_vectorized_matches_rows(self):
        S = np.random.default_rng(0).normal(size=(7, 5))
        np.testing.assert_array_equal(motion_model(S, 0.3), np.array([motion_model(s, 0.3) for s in S]))

    def test_observe(self):
        np.testing.assert_array_equal(observe([1, 2, 0.3, 4, 0.1]), [1, 2])
        s = np.array([1.0, -2.0, 0.7, 3.0, 0.2])
        np.testing.assert_allclose(observe(motion_model(s, 0.5)), [1 + 3 * np.cos(0.7) * 0.5, -2 + 3 * np.sin(0.7) * 0.5])

    def test_params_validation(self):
        with pytest.raises(ValueError):
            MotionParams(0.0)
        with pytest.raises(ValueError):
            MotionParams(1.0, -np.eye(5))
        with pytest.raises(ValueError):
            UkfParams(alpha=0.0)
        with pytest.raises(ValueError):
            StateBelief(np.zeros(5), -np.eye(5))


class TestSigmaWeights:
    def test_default_weights(self):
        wm, wc, c = sigma_weights(UkfParams())
        assert c == pytest.approx(0.05)
        assert wm.sum() == pytest.approx(1.0)
        assert wm[0] == pytest.approx(-4.95 / 0.05)
        assert wc[0] == pytest.approx(wm[0] + 1 - 0.01 + 2)


class TestUkfPredict:
    def test_fixed_point(self):
        P = np.diag([2.0, 1.0, 0.1, 0.0, 0.0])
        b = StateBelief([1.0, 2.0, 0.5, 0.0, 0.0], P)
        out = ukf_predict(b, MotionParams(0.5, np.zeros((5, 5))))
        np.testing.assert_allclose(out.mean, b.mean, atol=1e-10)
        np.testing.assert_allclose(out.cov, b.cov, atol=1e-10)

    def test_linear_regime_matches_kf(self):
        rng = np.random.default_rng(3)
        th, dt = 0.4, 0.5
        P = np.zeros((5, 5))
        P[np.ix_([0, 1, 3], [0, 1, 3])] = spd(rng, 3)
        b = StateBelief([1.0, -1.0, th, 5.0, 0.0], P)
        Q = np.diag([0.1, 0.2, 0.0, 0.3, 0.0])
        out = ukf_predict(b, MotionParams(dt, Q))
        m, Pk = kf_predict(b.mean, b.cov, linear_F(th, dt), Q)
        np.testing.assert_allclose(out.mean, m, atol=1e-8)
        np.testing.assert_allclose(out.cov, Pk, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_trace_nondecreasing_independent_prior(self, seed):
        rng = np.random.default_rng(seed)
        m = [0.0, 0.0, rng.uniform(-np.pi, np.pi), rng.uniform(0, 20), rng.normal(0, 0.2)]
        b = StateBelief(m, np.diag(rng.uniform(1e-3, 2.0, 5)))
        out = ukf_predict(b, MotionParams(rng.uniform(0.05, 1.0)))
        assert np.trace(out.cov) >= np.trace(b.cov)

    def test_trace_grows_with_q(self):
        rng = np.random.default_rng(5)
        b = random_belief(rng)
        base = ukf_predict(b, MotionParams(0.5, np.zeros((5, 5))))
        noisy = ukf_predict(b, MotionParams(0.5))
        assert np.trace(noisy.cov) > np.trace(base.cov)
        np.testing.assert_allclose(noisy.cov - base.cov, MotionParams(0.5).Q, atol=1e-12)

    def test_heading_wrap_through_predict(self):
        b = StateBelief([0, 0, np.pi - 0.01, 1.0, 0.02], np.diag([1, 1, 1e-6, 0.1, 1e-8]))
        out = ukf_predict(b, MotionParams(1.0))
        assert out.mean[2] == pytest.approx(-np.pi + 0.01, abs=1e-6)
        assert np.all(np.isfinite(out.cov))
        assert out.cov[2, 2] < 1e-4

    def test_circular_mean_near_branch_cut(self):
        # sigma points straddle +-pi; a naive arithmetic mean would land near 0
        b = StateBelief([0, 0, np.pi, 0.0, 0.0], np.diag([1, 1, 0.01, 0.1, 0.0]))
        out = ukf_predict(b, MotionParams(0.1, np.zeros((5, 5))))
        assert abs(wrap_angle(out.mean[2] - np.pi)) < 1e-9
        assert out.cov[2, 2] == pytest.approx(0.01, rel=1e-6)

    def test_singular_cov_uses_floor(self):
        P = np.zeros((5, 5))
        b = StateBelief([0, 0, 0.1, 2.0, 0.0], P)
        out = ukf_predict(b, MotionParams(0.5))
        assert np.all(np.isfinite(out.cov))

    def test_not_psd_raises(self):
        b = StateBelief.__new__(StateBelief)
        object.__setattr__(b, "mean", np.zeros(5))
        object.__setattr__(b, "cov", np.diag([1.0, 1.0, np.nan, 1.0, 1.0]))
        with pytest.raises(np.linalg.LinAlgError):
            ukf_predict(b, MotionParams(0.5))


class TestUkfUpdate:
    def test_zero_innovation(self):
        b = random_belief(np.random.default_rng(6))
        zhat, _ = filters.predicted_measurement(b)
        post, innov, _ = ukf_update(b, zhat, np.eye(2))
        np.testing.assert_allclose(innov, 0, atol=1e-12)
        np.testing.assert_allclose(post.mean, b.mean, atol=1e-10)

    def test_uninformative(self):
        b = random_belief(np.random.default_rng(7))
        post, _, _ = ukf_update(b, b.mean[:2] + 3.0, 1e6 * np.eye(2))
        np.testing.assert_allclose(post.cov, b.cov, rtol=1e-4, atol=1e-4 * np.abs(b.cov).max())
        np.testing.assert_allclose(post.mean, b.mean, rtol=1e-4, atol=1e-4 * np.abs(b.mean).max())

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_kf(self, seed):
        rng = np.random.default_rng(seed)
        b = random_belief(rng)
        z = rng.normal(0, 5, 2)
        R = spd(rng, 2)
        post, innov, S = ukf_update(b, z, R)
        m, P = kf_update(b.mean, b.cov, z, R)
        np.testing.assert_allclose(post.mean, m, atol=1e-8)
        np.testing.assert_allclose(post.cov, P, atol=1e-8)
        np.testing.assert_allclose(S, b.cov[:2, :2] + R, atol=1e-8)
        np.testing.assert_allclose(innov, z - b.mean[:2], atol=1e-8)

    def test_singular_s_raises(self):
        b = StateBelief(np.zeros(5), np.diag([0.0, 0.0, 1.0, 1.0, 1.0]))
        with pytest.raises(np.linalg.LinAlgError):
            ukf_update(b, [1.0, 1.0], np.zeros((2, 2)))


class TestSpfUpdateGm:
    def test_single_component(self):
        rng = np.random.default_rng(8)
        b = random_belief(rng)
        R = spd(rng, 2)
        meas = GaussMix2.single([1.0, 2.0], R)
        post, diag = spf_update_gm(b, meas, 0.0)
        ref, innov, S = ukf_update(b, [1.0, 2.0], R)
        np.testing.assert_allclose(post.mean, ref.mean, atol=1e-14)
        np.testing.assert_allclose(diag["S"], S, atol=1e-14)

    def test_effective_r(self):
        b = random_belief(np.random.default_rng(9))
        meas = GaussMix2([0.5, 0.5], [[0, 0], [0, 0]], [np.eye(2), np.diag([3.0, 1.0])])
        _, diag = spf_update_gm(b, meas, 0.0)
        np.testing.assert_allclose(diag["R"], np.diag([2.0, 1.0]), atol=1e-14)

    def test_heading_swaps_axes(self):
        b = random_belief(np.random.default_rng(10))
        meas = GaussMix2.single([0, 0], np.diag([5.0, 1.0]))
        _, diag = spf_update_gm(b, meas, np.pi / 2)
        np.testing.assert_allclose(diag["R"], np.diag([1.0, 5.0]), atol=1e-14)


class TestLinearSystem:
    def _run(self, seed, steps=100):
        rng = np.random.default_rng(seed)
        th, dt = rng.uniform(-np.pi, np.pi), 0.5
        P = np.zeros((5, 5))
        P[np.ix_([0, 1, 3], [0, 1, 3])] = spd(rng, 3)
        m = np.array([0.0, 0.0, th, 8.0, 0.0])
        Q = np.diag([1e-2, 1e-2, 0.0, 0.25, 0.0]) * dt
        zs = [rng.normal(0, 3, 2) + [8 * np.cos(th) * dt * k, 8 * np.sin(th) * dt * k] for k in range(1, steps + 1)]
        Rs = [spd(rng, 2) for _ in range(steps)]
        return m, P, Q, dt, th, zs, Rs

    @pytest.mark.parametrize("seed", range(3))
    def test_spf_matches_kf(self, seed):
        m, P, Q, dt, th, zs, Rs = self._run(seed)
        b = StateBelief(m, P)
        mk, Pk = m.copy(), P.copy()
        F = linear_F(th, dt)
        for z, R in zip(zs, Rs):
            b = ukf_predict(b, MotionParams(dt, Q))
            b, _, _ = ukf_update(b, z, R)
            mk, Pk = kf_predict(mk, Pk, F, Q)
            mk, Pk = kf_update(mk, Pk, z, R)
            np.testing.assert_allclose(b.mean, mk, atol=1e-8)
            np.testing.assert_allclose(b.cov, Pk, atol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_gsf_single_matches_spf(self, seed):
        m, P, Q, dt, th, zs, Rs = self._run(seed)
        b = StateBelief(m, P)
        gb = GsfBelief.from_belief(b)
        for z, R in zip(zs, Rs):
            mp = MotionParams(dt, Q)
            b = ukf_predict(b, mp)
            gb = gsf_predict(gb, mp)
            meas = GaussMix2.single(z, R)
            b, _ = spf_update_gm(b, meas, 0.0)
            gb, _ = gsf_update(gb, meas, 0.0, M_max=1)
            np.testing.assert_allclose(gb.hypotheses[0].mean, b.mean, atol=1e-8)
            np.testing.assert_allclose(gb.hypotheses[0].cov, b.cov, atol=1e-8)
            assert gb.weights[0] == 1.0


class TestGsfUpdate:
    def test_degenerate_equals_ukf(self):
        rng = np.random.default_rng(11)
        b = random_belief(rng)
        R = spd(rng, 2)
        gb, diag = gsf_update(GsfBelief.from_belief(b), GaussMix2.single([1, 1], R), 0.3)
        ref, _, _ = ukf_update(b, [1, 1], rotate_to_inertial(GaussMix2.single([1, 1], R), 0.3).covs[0])
        assert len(gb) == 1 and gb.weights[0] == 1.0
        np.testing.assert_allclose(gb.hypotheses[0].mean, ref.mean, atol=1e-14)
        assert diag == {"fallback": False, "n_pruned": 0, "n_merged": 0}

    @pytest.mark.parametrize("seed", range(5))
    def test_grid_bayes(self, seed):
        assert grid_tv(seed) < 1e-3

    def test_prune_and_merge_counts(self):
        rng = np.random.default_rng(12)
        gb = GsfBelief(np.full(4, 0.25), tuple(random_belief(rng) for _ in range(4)))
        meas = GaussMix2([0.5, 0.3, 0.2], np.zeros((3, 2)), [np.eye(2), 4 * np.eye(2), 36 * np.eye(2)])
        out, diag = gsf_update(gb, meas, None, M_max=3, w_floor=1e-4)
        assert len(out) == 3
        assert 12 - diag["n_pruned"] - diag["n_merged"] == 3
        assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)

    def test_huge_innovation_stays_in_log_domain(self):
        b1 = StateBelief([0, 0, 0, 1, 0], np.eye(5))
        b2 = StateBelief([1e4, 0, 0, 1, 0], np.eye(5))
        gb = GsfBelief([0.5, 0.5], (b1, b2))
        out, diag = gsf_update(gb, GaussMix2.single([-1e5, 0], np.eye(2)), 0.0, w_floor=0.0)
        assert not diag["fallback"]
        assert np.all(np.isfinite(out.weights))

    def test_fallback_when_likelihoods_vanish(self, monkeypatch):
        rng = np.random.default_rng(13)
        gb = GsfBelief([0.7, 0.3], (random_belief(rng), random_belief(rng)))
        meas = GaussMix2([0.6, 0.4], np.zeros((2, 2)), [np.eye(2), 4 * np.eye(2)])
        monkeypatch.setattr(filters, "_gauss_logpdf", lambda x, S: -np.inf)
        out, diag = gsf_update(gb, meas, 0.0, w_floor=0.0)
        assert diag["fallback"]
        np.testing.assert_allclose(np.sort(out.weights), np.sort([0.42, 0.28, 0.18, 0.12]))

    def test_m_max_validation(self):
        gb = GsfBelief.from_belief(random_belief(np.random.default_rng(0)))
        with pytest.raises(ValueError):
            gsf_update(gb, GaussMix2.single([0, 0], np.eye(2)), 0.0, M_max=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6))
    def test_weights_normalized(self, seed, M_max):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        gb = GsfBelief(rng.dirichlet(np.ones(n)), tuple(random_belief(rng) for _ in range(n)))
        gb = gsf_predict(gb, MotionParams(0.5))
        assert gb.weights.sum() == pytest.approx(1.0, abs=1e-9)
        K = int(rng.integers(1, 4))
        meas = GaussMix2(rng.dirichlet(np.ones(K)), np.tile(rng.normal(0, 5, 2), (K, 1)), [spd(rng, 2) for _ in range(K)])
        out, _ = gsf_update(gb, meas, None, M_max=M_max)
        assert 1 <= len(out) <= M_max
        assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(out.weights >= 0)


class TestGsfPredictCondense:
    def test_single_equals_ukf(self):
        b = random_belief(np.random.default_rng(14))
        mp = MotionParams(0.5)
        out = gsf_predict(GsfBelief.from_belief(b), mp)
        ref = ukf_predict(b, mp)
        np.testing.assert_array_equal(out.hypotheses[0].mean, ref.mean)

    def test_weights_invariant_and_deterministic(self):
        rng = np.random.default_rng(15)
        gb = GsfBelief([0.2, 0.8], (random_belief(rng), random_belief(rng)))
        a = gsf_predict(gb, MotionParams(0.5))
        b = gsf_predict(gb, MotionParams(0.5))
        np.testing.assert_array_equal(a.weights, gb.weights)
        for ha, hb in zip(a.hypotheses, b.hypotheses):
            np.testing.assert_array_equal(ha.mean, hb.mean)
            np.testing.assert_array_equal(ha.cov, hb.cov)

    def test_condense_single(self):
        b = random_belief(np.random.default_rng(16))
        assert gsf_condense(GsfBelief.from_belief(b)) is b

    def test_condense_zero_weight(self):
        rng = np.random.default_rng(17)
        b1, b2 = random_belief(rng), random_belief(rng)
        out = gsf_condense(GsfBelief([1.0, 0.0], (b1, b2)))
        np.testing.assert_allclose(out.mean, b1.mean, atol=1e-12)
        np.testing.assert_allclose(out.cov, b1.cov, atol=1e-12)

    def test_condense_spread_term(self):
        P = np.diag([1.0, 1.0, 0.01, 1.0, 0.01])
        b1 = StateBelief([0, 0, 0.1, 5, 0], P)
        b2 = StateBelief([2, 0, 0.1, 5, 0], P)
        out = gsf_condense(GsfBelief([0.5, 0.5], (b1, b2)))
        assert out.mean[0] == pytest.approx(1.0)
        assert out.cov[0, 0] == pytest.approx(2.0)
        rng = np.random.default_rng(18)
        n = 10**6
        pick = rng.random(n) < 0.5
        x = np.where(pick, 0.0, 2.0) + rng.standard_normal(n)
        assert abs(x.var() - out.cov[0, 0]) < 4 * np.sqrt((np.mean((x - x.mean()) ** 4) - x.var() ** 2) / n)

    def test_condense_heading_on_circle(self):
        P = np.diag([1.0, 1.0, 0.01, 1.0, 0.01])
        b1 = StateBelief([0, 0, np.pi - 0.1, 5, 0], P)
        b2 = StateBelief([0, 0, -np.pi + 0.1, 5, 0], P)
        out = gsf_condense(GsfBelief([0.5, 0.5], (b1, b2)))
        assert abs(wrap_angle(out.mean[2] - np.pi)) < 1e-12
        assert out.cov[2, 2] == pytest.approx(0.01 + 0.01, rel=1e-9)


def test_covariances_stay_pd_over_random_steps():
    rng = np.random.default_rng(19)
    b = random_belief(rng)
    gb = GsfBelief.from_belief(b)
    worst = np.inf
    for k in range(10_000):
        mp = MotionParams(rng.uniform(0.05, 1.0))
        b = ukf_predict(b, mp)
        R = spd(rng, 2, rng.uniform(0.1, 3))
        z = b.mean[:2] + rng.multivariate_normal(np.zeros(2), R)
        b, _, _ = ukf_update(b, z, R)
        worst = min(worst, np.linalg.eigvalsh(b.cov).min())
        if k % 20 == 0:
            gb = gsf_predict(gb, mp)
            meas = GaussMix2([0.7, 0.3], [z, z], [R, 4 * R])
            gb, _ = gsf_update(gb, meas, None, M_max=4)
            for h in gb.hypotheses:
                worst = min(worst, np.linalg.eigvalsh(h.cov).min())
                np.testing.assert_array_equal(h.cov, h.cov.T)
        np.testing.assert_array_equal(b.cov, b.cov.T)
    assert worst > 0


def test_initial_belief():
    b = initial_belief([0, 0], [3, 4], 0.5)
    np.testing.assert_allclose(b.mean, [0, 0, np.arctan2(4, 3), 10.0, 0.0])
