import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from latentgraph.dispersion import (MarginSpec, MglmmSpec, LongDataset, apply_inverse_link, conditional_density,
                                    simulate_mglmm, unit_deviance, variance_function)
from latentgraph.elliptical import EllipticalSpec, SpecError


def paper_model(q=800, replicates=40, cov12=0.0, family="gaussian", nu=None):
    scatter = [[0.8166, cov12], [cov12, 0.91302]]
    return MglmmSpec(
        [MarginSpec("gamma", "log", [0.6], 0.5), MarginSpec("poisson", "log", [0.6])],
        q, replicates, EllipticalSpec(family, scatter, nu))


class TestUnitDeviance:
    def test_zero_at_mean(self):
        assert unit_deviance("poisson", 3, 3) == 0.0

    def test_gaussian(self):
        assert unit_deviance("gaussian", 2, 0) == 4.0

    def test_gamma_value(self):
        assert unit_deviance("gamma", 1, 2) == pytest.approx(2 * (np.log(2) - 0.5), rel=1e-12)

    def test_gamma_against_saturated_loglik(self):
        # d(y, mu) = 2 lam [log f(y; y) - log f(y; mu)]
        lam, y, mu = 0.5, 1.0, 2.0
        logf = lambda m: stats.gamma.logpdf(y, a=1 / lam, scale=lam * m)
        assert unit_deviance("gamma", y, mu) == pytest.approx(2 * lam * (logf(y) - logf(mu)), rel=1e-10)

    def test_poisson_zero_count(self):
        assert unit_deviance("poisson", 0, 2.0) == pytest.approx(4.0)

    def test_mean_outside_domain(self):
        with pytest.raises(ValueError):
            unit_deviance("poisson", 1, -1.0)
        with pytest.raises(ValueError):
            unit_deviance("binomial", 1, 3.0, trials=3)

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from(["poisson", "gamma", "gaussian", "binomial"]),
           st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    def test_positive_off_diagonal(self, family, u, w):
        m = 10
        if family == "poisson":
            y, mu = float(round(20 * u)), 20 * w + 0.01
        elif family == "binomial":
            y, mu = float(round(m * u)), m * w
        elif family == "gamma":
            y, mu = 10 * u, 10 * w
        else:
            y, mu = 10 * u - 5, 10 * w - 5
        dev = unit_deviance(family, y, mu, trials=m)
        if y == mu:
            assert dev == 0.0
        else:
            assert dev > 0.0


class TestConditionalDensity:
    def test_examples(self):
        assert conditional_density(MarginSpec("poisson", "log", [0.0]), 0, 2.0) == pytest.approx(np.exp(-2), rel=1e-12)
        assert conditional_density(MarginSpec("gaussian", "identity", [0.0]), 0, 0.0) == pytest.approx((2 * np.pi) ** -0.5)
        assert conditional_density(MarginSpec("gamma", "log", [0.0], 0.5), 1.0, 1.0) == pytest.approx(4 * np.exp(-2), rel=1e-12)

    def test_gamma_normalises(self):
        m = MarginSpec("gamma", "log", [0.0], 0.5)
        val, _ = integrate.quad(lambda y: conditional_density(m, y, 1.0), 0, np.inf)
        assert val == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("margin,ys,mu,ref", [
        (MarginSpec("poisson", "log", [0.0]), np.arange(0, 30), 3.7, lambda y, mu: stats.poisson.pmf(y, mu)),
        (MarginSpec("gamma", "log", [0.0], 0.3), np.linspace(0.05, 8, 40), 2.2,
         lambda y, mu: stats.gamma.pdf(y, a=1 / 0.3, scale=0.3 * mu)),
        (MarginSpec("gaussian", "identity", [0.0], 2.5), np.linspace(-4, 4, 21), 0.7,
         lambda y, mu: stats.norm.pdf(y, mu, np.sqrt(2.5))),
        (MarginSpec("binomial", "logit", [0.0], trials=7), np.arange(0, 8), 2.9,
         lambda y, mu: stats.binom.pmf(y, 7, mu / 7)),
    ])
    def test_matches_classical(self, margin, ys, mu, ref):
        np.testing.assert_allclose(conditional_density(margin, ys, mu), ref(ys, mu), rtol=1e-10)

    def test_unit_dispersion_enforced(self):
        with pytest.raises(SpecError):
            MarginSpec("poisson", "log", [0.0], 2.0)
        with pytest.raises(SpecError):
            MarginSpec("binomial", "logit", [0.0], 0.5, trials=3)


class TestVarianceFunction:
    def test_values(self):
        assert variance_function("poisson", 3.0) == 3.0
        assert variance_function("gaussian", 17.0) == 1.0
        assert variance_function("gamma", 2.0) == 4.0
        assert variance_function("binomial", 2.0, trials=4) == pytest.approx(1.0)

    @pytest.mark.parametrize("family,mu,trials", [("gamma", 2.0, 1), ("poisson", 3.0, 1), ("binomial", 1.5, 5),
                                                  ("gaussian", 0.3, 1)])
    def test_second_derivative_of_deviance(self, family, mu, trials):
        # V(mu) = 2 / (d^2/dy^2 d(y, mu) at y = mu), central differences in y
        h = 1e-4
        d2 = (unit_deviance(family, mu + h, mu, trials) - 2 * unit_deviance(family, mu, mu, trials)
              + unit_deviance(family, mu - h, mu, trials)) / h**2
        assert 2 / d2 == pytest.approx(variance_function(family, mu, trials), rel=1e-6)


def test_inverse_links():
    assert apply_inverse_link("log", 0.0) == 1.0
    assert apply_inverse_link("logit", 0.0) == 0.5
    assert apply_inverse_link("identity", 0.3) == 0.3
    assert apply_inverse_link("log", 0.6) == pytest.approx(1.8221188, rel=1e-7)
    assert apply_inverse_link("logit", 0.0, trials=4) == 2.0


class TestSimulate:
    def test_paper_design_row_count(self):
        data, b = simulate_mglmm(paper_model(), 3)
        assert len(data) == 64_000
        assert np.sum(data.margin == 0) == 32_000
        assert b.shape == (800, 2)
        assert np.all(data.y[data.margin == 0] > 0)
        assert np.all(data.y[data.margin == 1] == np.round(data.y[data.margin == 1]))

    def test_degenerate_noise_recovers_latent(self):
        spec = MglmmSpec([MarginSpec("gaussian", "identity", [0.0], 1e-12)], 30, 1,
                         EllipticalSpec("gaussian", [[1.0]]))
        data, b = simulate_mglmm(spec, 4)
        np.testing.assert_allclose(data.y, b[:, 0], atol=1e-5)

    def test_deterministic(self):
        a, ba = simulate_mglmm(paper_model(50, 3), 8)
        c, bc = simulate_mglmm(paper_model(50, 3), 8)
        np.testing.assert_array_equal(a.y, c.y)
        np.testing.assert_array_equal(ba, bc)

    def test_conditional_mean(self):
        # per-cluster t-check of the empirical mean against exp(0.6 + b)
        spec = paper_model(q=50, replicates=2000)
        data, b = simulate_mglmm(spec, 21)
        lam = 0.5
        fails = 0
        for j, m in enumerate(spec.margins):
            cl, y, _ = data.select(j)
            mean = np.bincount(cl, weights=y) / 2000
            mu = np.exp(0.6 + b[:, j])
            var = lam * mu**2 if m.family == "gamma" else mu
            z = (mean - mu) / np.sqrt(var / 2000)
            fails += int(np.sum(np.abs(z) > 3))
        # 100 checks at 3 standard errors; a couple of exceedances would already be unusual
        assert fails <= 2

    def test_csv_roundtrip(self, tmp_path):
        data, _ = simulate_mglmm(paper_model(5, 2), 1)
        path = tmp_path / "d.csv"
        data.write_csv(path)
        assert path.read_text().splitlines()[0] == "margin,cluster,y,x1"
        back = LongDataset.read_csv(path)
        np.testing.assert_array_equal(back.y, data.y)
        np.testing.assert_array_equal(back.cluster, data.cluster)
        np.testing.assert_array_equal(back.margin, data.margin)

    def test_invalid_specs(self):
        with pytest.raises(SpecError):
            MglmmSpec([MarginSpec("poisson", "log", [0.6])], 1, 1, EllipticalSpec("gaussian", [[1.0]]))
        with pytest.raises(SpecError):
            MglmmSpec([MarginSpec("poisson", "log", [0.6])], 5, 1, EllipticalSpec("gaussian", np.eye(2)))
        with pytest.raises(SpecError):
            MarginSpec("gamma", "identity", [1.0], 1.0)

    def test_covariate_table(self):
        x = np.column_stack([np.ones(12), np.linspace(-1, 1, 12)])
        spec = MglmmSpec([MarginSpec("poisson", "log", [0.2, 0.5])], 4, 3, EllipticalSpec("gaussian", [[0.1]]), x)
        data, _ = simulate_mglmm(spec, 0)
        assert data.x.shape == (12, 2)
