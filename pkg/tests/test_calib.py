import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from constraint_uq import bnn
from constraint_uq.bnn import VariationalMLP, init_model, softplus_inv
from constraint_uq.calib import (
    DEFAULT_LEVELS,
    LossWeights,
    adjust_variance,
    avm,
    bin_centers,
    bin_index,
    bin_stats,
    calibration_report,
    constraint_penalty,
    coverage_events,
    csr,
    ece,
    mce,
    nll,
    regression_scores,
    soft_ece_loss,
    total_loss,
)
from constraint_uq.errors import DataError
from constraint_uq.expr import parse_constraints


def recount(p, r, M):
    """Per-bin loop: bin m holds (m/M, (m+1)/M], bin 0 also holds 0."""
    n = len(p)
    total = 0.0
    gaps = []
    for m in range(M):
        lo, hi = m / M, (m + 1) / M
        idx = [i for i in range(n) if (lo < p[i] <= hi) or (m == 0 and p[i] == 0.0)]
        if not idx:
            continue
        conf = sum(p[i] for i in idx) / len(idx)
        acc = sum(r[i] for i in idx) / len(idx)
        gaps.append(abs(acc - conf))
        total += len(idx) / n * abs(acc - conf)
    return total, max(gaps)


class TestBinnedErrors:
    def test_perfect_bin(self):
        p = np.full(10, 0.8)
        r = np.array([1] * 8 + [0] * 2)
        assert ece(p, r) == pytest.approx(0.0, abs=1e-15)

    def test_single_bin_gap(self):
        p = np.full(10, 0.9)
        r = np.array([1] * 7 + [0] * 3)
        assert ece(p, r) == pytest.approx(0.2, abs=1e-15)
        assert mce(p, r) == pytest.approx(0.2, abs=1e-15)

    def test_one_bad_bin_sets_mce(self):
        p = np.array([0.15] * 20 + [0.55] * 10)
        r = np.array([1] * 3 + [0] * 17 + [1] * 8 + [0] * 2)
        assert mce(p, r) == pytest.approx(0.25, abs=1e-12)

    def test_recount_exact_on_dyadic_grid(self):
        # dyadic confidences make every partial sum exact, so equality is bitwise
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.integers(0, 1025, size=200) / 1024
            r = rng.integers(0, 2, size=200).astype(float)
            e, m = recount(p.tolist(), r.tolist(), 10)
            assert ece(p, r, 10) == pytest.approx(e, rel=0, abs=1e-15)
            assert mce(p, r, 10) == m

    def test_recount_random(self):
        rng = np.random.default_rng(1)
        for M in (5, 10, 15):
            p = rng.uniform(size=200)
            r = (rng.uniform(size=200) < p).astype(float)
            e, m = recount(p.tolist(), r.tolist(), M)
            assert ece(p, r, M) == pytest.approx(e, rel=1e-13)
            assert mce(p, r, M) == pytest.approx(m, rel=1e-13)

    def test_edges(self):
        np.testing.assert_array_equal(bin_index([0.0, 0.1, 0.1000001, 1.0], 10), [0, 0, 1, 9])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=60))
    def test_bin_invariants(self, pairs):
        p = np.array([a for a, _ in pairs])
        r = np.array([float(b) for _, b in pairs])
        b = bin_stats(p, r)
        assert b.counts.sum() == len(p)
        assert 0.0 <= ece(p, r) <= mce(p, r) + 1e-15 <= 1.0 + 1e-15

    @pytest.mark.parametrize("p,r", [([], []), ([0.5], [1, 0]), ([1.5], [1]), ([np.nan], [1])])
    def test_bad_input(self, p, r):
        with pytest.raises(DataError):
            ece(p, r)


class TestCoverage:
    def test_center_always_covered(self):
        p, r = coverage_events((np.zeros((3, 2)), np.ones((3, 2))), np.zeros((3, 2)))
        assert r.all() and len(p) == 3 * 2 * len(DEFAULT_LEVELS)

    def test_far_tail_never_covered(self):
        _, r = coverage_events((np.zeros(4), np.full(4, 0.25)), np.full(4, 5.0), levels=[0.5, 0.9, 0.99])
        assert not r.any()

    def test_event_order(self):
        p, r = coverage_events((np.zeros((2, 1)), np.ones((2, 1))), [[0.0], [1.0]], levels=[0.5, 0.9])
        np.testing.assert_array_equal(p, [0.5, 0.9, 0.5, 0.9])
        np.testing.assert_array_equal(r, [1, 1, 0, 1])  # z(0.5) = 0.674 < 1 < z(0.9)

    def test_self_consistency(self):
        rng = np.random.default_rng(7)
        n = 10_000
        mean = rng.normal(size=(n, 1))
        var = rng.uniform(0.05, 3.0, size=(n, 1))
        y = mean + np.sqrt(var) * rng.standard_normal((n, 1))
        p, r = coverage_events((mean, var), y)
        for q in DEFAULT_LEVELS:
            assert abs(r[p == q].mean() - q) <= 0.02

    def test_predictive_distribution_input(self):
        pd = bnn.predict(init_model((1, 4, 2)), [[0.0], [1.0]], S=5)
        pd.adjusted_var = pd.total_var * 4.0
        a = coverage_events(pd, pd.mean + 1.5 * np.sqrt(pd.total_var))
        b = coverage_events((pd.mean, pd.adjusted_var), pd.mean + 1.5 * np.sqrt(pd.total_var))
        np.testing.assert_array_equal(a[1], b[1])

    def test_nonpositive_variance(self):
        with pytest.raises(DataError):
            coverage_events((np.zeros(2), np.array([1.0, 0.0])), np.zeros(2))

    def test_bad_levels(self):
        with pytest.raises(ValueError):
            coverage_events((np.zeros(2), np.ones(2)), np.zeros(2), levels=[1.0])


class TestNLL:
    def test_closed_form(self):
        assert nll((np.zeros((1, 3)), np.ones((1, 3))), np.zeros((1, 3))) == pytest.approx(1.5 * np.log(2 * np.pi))

    def test_halving_variance(self):
        a = nll((np.zeros((1, 2)), np.ones((1, 2))), np.zeros((1, 2)))
        b = nll((np.zeros((1, 2)), np.full((1, 2), 0.5)), np.zeros((1, 2)))
        assert b - a == pytest.approx(-np.log(2.0), rel=1e-12)  # -1/2 log 2 per dim, 2 dims

    def test_matches_density(self):
        rng = np.random.default_rng(2)
        m, v, y = rng.normal(size=(50, 3)), rng.uniform(0.1, 2, size=(50, 3)), rng.normal(size=(50, 3))
        ref = -stats.norm.logpdf(y, m, np.sqrt(v)).sum(axis=1).mean()
        assert nll((m, v), y) == pytest.approx(ref, rel=1e-12)


class TestAdjustVariance:
    def test_arithmetic(self):
        assert adjust_variance(0.1, 0.04, 0.5) == pytest.approx(0.12)

    def test_identity_cases(self):
        v = np.array([[0.1, 0.2], [0.3, 0.4]])
        assert np.array_equal(adjust_variance(v, np.zeros(2), 0.5), v)
        assert np.array_equal(adjust_variance(v, np.array([1.0, 2.0]), 0.0), v)

    def test_scalar_distance_added_to_every_output(self):
        out = adjust_variance(np.ones((2, 3)), np.array([0.0, 2.0]), 0.5)
        np.testing.assert_array_equal(out, [[1, 1, 1], [2, 2, 2]])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
    def test_monotone(self, v, d1, d2, l1, l2):
        d_lo, d_hi = sorted((d1, d2))
        l_lo, l_hi = sorted((l1, l2))
        assert adjust_variance(v, d_lo, l_hi) <= adjust_variance(v, d_hi, l_hi)
        assert adjust_variance(v, d_hi, l_lo) <= adjust_variance(v, d_hi, l_hi)
        assert adjust_variance(v, d_lo, l_lo) >= v

    def test_negative_inputs(self):
        for args in ((-1.0, 0.0, 0.5), (1.0, -0.1, 0.5), (1.0, 0.0, -0.5)):
            with pytest.raises(ValueError):
                adjust_variance(*args)

    def test_adjustment_helps_when_distance_tracks_error(self):
        # outputs pushed outside [0, 1] are the misspecified ones; inflation should lower NLL
        gains = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            y = rng.uniform(0.05, 0.95, size=2000)
            bias = np.where(rng.uniform(size=2000) < 0.3, rng.choice([-1, 1], 2000) * rng.uniform(0.3, 0.8, 2000), 0.0)
            y_hat = y + bias + 0.05 * rng.standard_normal(2000)
            proj = np.clip(y_hat, 0.0, 1.0)
            d2 = (proj - y_hat) ** 2
            var = np.full(2000, 0.05**2)
            before = nll((proj, var), y)
            after = nll((proj, adjust_variance(var, d2, 0.5)), y)
            gains.append(before - after)
        assert stats.ttest_1samp(gains, 0.0, alternative="greater").pvalue < 0.05


class TestSoftECE:
    def test_zero_residual(self):
        p = np.linspace(0.05, 0.95, 8)
        value, _, _ = soft_ece_loss(p, p)
        assert value == pytest.approx(8e-6, rel=1e-9)  # smoothing floor of 1e-6 per sample
        assert value <= 1e-5

    def test_hard_limit(self):
        rng = np.random.default_rng(3)
        for M in (5, 10):
            # keep confidences away from the boundaries between bins
            k = rng.integers(0, M, size=200)
            p = (k + rng.uniform(0.05, 0.95, size=200)) / M
            r = rng.integers(0, 2, size=200).astype(float)
            value, _, _ = soft_ece_loss(p, r, bin_centers(M), tau_bin=1e-4)
            idx = bin_index(p, M)
            hard = sum(np.abs(r[idx == m] - p[idx == m]).sum() for m in range(M))
            assert abs(value - hard) <= 1e-6

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(4)
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 20))
            p = rng.uniform(0.01, 0.99, size=n)
            r = np.where(rng.uniform(size=n) < 0.5, rng.integers(0, 2, size=n), rng.uniform(size=n))
            tau = float(rng.uniform(0.03, 0.3))
            _, gp, gr = soft_ece_loss(p, r, tau_bin=tau)
            for arr, g in ((p, gp), (r, gr)):
                for i in range(n):
                    up, dn = arr.copy(), arr.copy()
                    up[i] += h
                    dn[i] -= h
                    args_up = (up, r) if arr is p else (p, up)
                    args_dn = (dn, r) if arr is p else (p, dn)
                    fd = (soft_ece_loss(*args_up, tau_bin=tau)[0] - soft_ece_loss(*args_dn, tau_bin=tau)[0]) / (2 * h)
                    if abs(r[i] - p[i]) < 1e-3:
                        continue  # the smoothed |.| has curvature ~1/1e-6 there
                    worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-8))
        assert worst < 1e-5

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            soft_ece_loss([0.5], [1.0], tau_bin=0.0)


class TestConstraintPenalty:
    def test_satisfied(self):
        cs = parse_constraints("soft(1): y[0] <= 1\nsoft(2): 1*y[0] + 1*y[1] <= 3\n", 2)
        v, g = constraint_penalty(np.array([0.5, 0.5]), (), cs)
        assert v == 0.0 and not g.any()

    def test_hinge_square(self):
        cs = parse_constraints("soft(1): y[0] <= 1\n", 1)
        v, g = constraint_penalty(np.array([2.0]), (), cs)
        assert v == 1.0 and g[0] == 2.0

    def test_conservation_scaled_by_tolerance(self):
        cs = parse_constraints("soft(1): sum(1*y[0] + 1*y[1]) == 1 tol 0.1\n", 2)
        v, _ = constraint_penalty(np.array([0.6, 0.6]), (), cs)
        assert v == pytest.approx(4.0)

    def test_gradients_vs_finite_differences(self):
        cs = parse_constraints(
            "soft(1.5): y[0] <= 0.2\nsoft(0.5): y[1] in [-0.1, 0.1]\n"
            "soft(2): sum(1*y[0] + 2*y[1] + -1*y[2]) == 0.3 tol 0.05\n"
            "soft(1): g: square(y[0]) + y[1]*y[2] - x[0] <= 0\n"
            "soft(0.7): 1*y[2] + -2*x[1] <= 0.1\n", 3, 2)
        rng = np.random.default_rng(5)
        h = 1e-6
        for _ in range(50):
            y, x = rng.normal(size=3), rng.normal(size=2)
            _, g = constraint_penalty(y, x, cs)
            fd = np.array([(constraint_penalty(y + h * e, x, cs)[0] - constraint_penalty(y - h * e, x, cs)[0]) / (2 * h)
                           for e in np.eye(3)])
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


class TestConstraintMetrics:
    def test_csr_and_avm(self):
        cs = parse_constraints("hard: y[0] in [0, 1]\nhard: 1*y[0] + 1*y[1] <= 1\nsoft(1): y[1] <= -5\n", 2)
        Y = np.array([[0.5, 0.2], [1.5, 0.0], [0.2, 1.3], [0.5, 0.5 + 5e-7]])
        assert csr(cs, Y) == 50.0
        assert avm(cs, Y) == pytest.approx((0.5 + 0.5 + 0.5 + 5e-7) / 4)

    def test_report_invariants(self):
        rng = np.random.default_rng(6)
        m, v = rng.normal(size=(100, 2)), rng.uniform(0.1, 1, size=(100, 2))
        y = m + rng.normal(size=(100, 2))
        cs = parse_constraints("hard: y[0] <= 1\n", 2)
        rep = calibration_report(m, v, y, cs)
        assert rep.ece <= rep.mce and 0 <= rep.csr <= 100 and rep.avm >= 0
        assert len(rep.reliability_rows()) == 10 and sum(r[3] for r in rep.reliability_rows()) == 100 * 2 * 10

    def test_regression_scores(self):
        y = np.array([[1.0], [2.0], [3.0]])
        rmse, mae, r2 = regression_scores(y, y + np.array([[1.0], [-1.0], [0.0]]))
        assert rmse == pytest.approx(np.sqrt(2 / 3)) and mae == pytest.approx(2 / 3) and r2 == pytest.approx(0.0)


def tiny_setup(seed=0):
    """<= 200-parameter model, fixed noise, constraints with robustly fixed active sets."""
    rng = np.random.default_rng(seed)
    sizes = (2, 6, 6)  # 3 outputs
    m = init_model(sizes, seed=seed)
    assert m.n_params <= 200
    m.mu = rng.normal(scale=0.4, size=m.n_params)
    m.rho = softplus_inv(0.05) + rng.normal(scale=0.2, size=m.n_params)
    X = rng.normal(size=(12, 2))
    Y = rng.normal(scale=0.5, size=(12, 3))
    cs = parse_constraints(
        "[sum] hard: 1*y[0] + 1*y[1] + 1*y[2] == 0.2\n"
        "[cap] hard: y[0] <= 0.1\n"
        "[pen] soft(2): y[1] <= 0.0\n"
        "[pen2] soft(1): g: square(y[2]) - 1 <= 0\n", 3)
    eps = [rng.standard_normal(m.n_params) for _ in range(2)]
    return m, X, Y, cs, eps


def loss_at(m, mu, rho, X, Y, cs, eps, w, **kw):
    mm = VariationalMLP(m.sizes, mu, rho, m.prior_sigma, bayesian=m.bayesian)
    return total_loss(mm, X, Y, w, cs, eps=eps, n_total=40, **kw)


class TestTotalLoss:
    def test_reduces_to_prediction_plus_elbo(self):
        m, X, Y, _, eps = tiny_setup()
        w = LossWeights(alpha=0.7, beta=0.0, gamma=0.0)
        res = total_loss(m, X, Y, w, (), eps=eps, n_total=40)
        elbo, g_mu_e, g_rho_e = bnn.elbo_loss(m, X, Y, n_total=40, eps=eps)
        assert res.components["elbo"] == pytest.approx(elbo, rel=1e-12)
        assert res.value == pytest.approx(res.components["pred"] + 0.7 * elbo, rel=1e-12)
        assert res.components["ece"] == 0.0 and res.components["constraint"] == 0.0

    def test_components_are_additive(self):
        m, X, Y, cs, eps = tiny_setup()
        full = total_loss(m, X, Y, LossWeights(), cs, eps=eps, n_total=40)
        for name, comp in (("beta", "ece"), ("gamma", "constraint")):
            kw = {"beta": 0.1, "gamma": 10.0, name: 0.0}
            part = total_loss(m, X, Y, LossWeights(**kw), cs, eps=eps, n_total=40)
            weight = getattr(LossWeights(), name)
            assert full.value - part.value == pytest.approx(weight * full.components[comp], rel=1e-10)

    def test_projected_outputs_are_feasible(self):
        m, X, Y, cs, eps = tiny_setup()
        res = total_loss(m, X, Y, LossWeights(), cs, eps=eps)
        assert res.projection_events > 0
        hard = [c for c in cs if c.hard]
        assert all(c.satisfied(y) for c in hard for y in res.projected.reshape(-1, 3))

    def test_no_csl_leaves_outputs_alone(self):
        m, X, Y, cs, eps = tiny_setup()
        res = total_loss(m, X, Y, LossWeights(), cs, eps=eps, use_csl=False)
        assert res.projection_events == 0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_vs_finite_differences(self, seed):
        m, X, Y, cs, eps = tiny_setup(seed)
        w = LossWeights()
        res = loss_at(m, m.mu, m.rho, X, Y, cs, eps, w)
        h = 1e-5
        worst = 0.0
        for which in ("mu", "rho"):
            g = res.grad_mu if which == "mu" else res.grad_rho
            base = getattr(m, which)
            fd = np.zeros_like(base)
            for j in range(len(base)):
                up, dn = base.copy(), base.copy()
                up[j] += h
                dn[j] -= h
                args = [(up, m.rho), (dn, m.rho)] if which == "mu" else [(m.mu, up), (m.mu, dn)]
                fd[j] = (loss_at(m, *args[0], X, Y, cs, eps, w).value - loss_at(m, *args[1], X, Y, cs, eps, w).value) / (2 * h)
            scale = np.abs(fd).max()
            worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-2 * scale))))
        assert worst < 1e-3

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-0.1)
        with pytest.raises(ValueError):
            LossWeights(tau_bin=0.0)
