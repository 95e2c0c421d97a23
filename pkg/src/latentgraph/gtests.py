"""Tests for (conditional) block un-correlation of the random components."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.signal import fftconvolve
from scipy.special import gammaln
from scipy.stats import chi2

from .covest import BlockPartition, arrange, conditional_scatter
from .elliptical import SpecError, make_rng

EXACT = "exact-gaussian"
ELLIPTICAL = "asymptotic-elliptical"
MC_SEED = 0x5EED
MC_DRAWS = 200_000
CORRECTIONS = ("none", "holm", "bonferroni")


class SeriesError(ArithmeticError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class BetaProductParams:
    """``(alpha, beta)`` of each Beta factor, in the flattened (block, j) order."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple((float(a), float(b)) for a, b in self.pairs)
        if not pairs:
            raise SpecError("empty Beta product")
        if any(a <= 0 or b <= 0 for a, b in pairs):
            raise SpecError("Beta parameters must be positive")
        object.__setattr__(self, "pairs", pairs)

    @property
    def alphas(self):
        return np.array([a for a, _ in self.pairs])

    @property
    def betas(self):
        return np.array([b for _, b in self.pairs])


@dataclass
class TestResult:
    method: str
    statistic: float
    pvalue: float
    partition: BlockPartition
    null_params: BetaProductParams | None = None
    f: int | None = None
    kappa: float | None = None
    engine: str | None = None
    diagnostics: list = field(default_factory=list)

    def to_dict(self):
        return {
            "method": self.method,
            "statistic": float(self.statistic),
            "pvalue": float(self.pvalue),
            "f": None if self.f is None else int(self.f),
            "kappa": None if self.kappa is None else float(self.kappa),
            "partition": self.partition.to_dict(),
            "engine": self.engine,
            "diagnostics": list(self.diagnostics),
        }


# ---------------------------------------------------------------------------
# exact Gaussian test

def _logdet(a):
    sign, val = np.linalg.slogdet(a)
    if sign <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return val


def v_statistic(a_cond, part: BlockPartition) -> float:
    """det(A) over the product of the determinants of its diagonal blocks."""
    a = np.asarray(a_cond, dtype=float)
    if len(part.sizes) < 2:
        raise SpecError("need at least two tested blocks")
    if a.shape != (part.tested_dim, part.tested_dim):
        raise SpecError(f"matrix shape {a.shape} does not match blocks {part.sizes}")
    off = part.offsets()
    total = _logdet(a) - sum(_logdet(a[s:e, s:e]) for s, e in zip(off[:-1], off[1:]))
    return float(min(np.exp(total), 1.0))


def beta_product_params(q: int, part: BlockPartition) -> BetaProductParams:
    """Null law of V as a product of independent Beta factors.

    Conditioning on ``cond_size`` coordinates costs that many degrees of
    freedom, so ``q - cond_size`` plays the role of the sample size.
    """
    if len(part.sizes) < 2:
        raise SpecError("need at least two tested blocks")
    n = q - part.cond_size
    pairs = []
    for i in range(1, len(part.sizes)):
        dbar = sum(part.sizes[:i])
        for j in range(1, part.sizes[i] + 1):
            alpha = 0.5 * (n - dbar - j)
            if alpha <= 0:
                raise SpecError("insufficient clusters for exact null")
            pairs.append((alpha, 0.5 * dbar))
    return BetaProductParams(tuple(pairs))


def sample_beta_product(params: BetaProductParams, n, seed=MC_SEED) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    out = np.ones(n)
    for a, b in params.pairs:
        out *= rng.beta(a, b, size=n)
    return out


@lru_cache(maxsize=64)
def _sorted_null(params: BetaProductParams, n, seed):
    return np.sort(sample_beta_product(params, n, seed))


class TangSeries:
    """Series density of a product of independent Beta variables.

    ``f(v) = K v^(b_d - 1) (1 - v)^(h_d - 1) sum_r sigma_r (1 - v)^r`` with the
    coefficients built factor by factor.  ``recursion="printed"`` replaces the
    rising factorial ``(c_j - b_{j-1})_s`` in the convolution weights with the
    bare constant ``c_j - b_{j-1}``; it is kept for comparison and is wrong
    whenever there is more than one factor.
    """

    def __init__(self, params: BetaProductParams, recursion="pochhammer"):
        if recursion not in ("pochhammer", "printed"):
            raise ValueError(f"unknown recursion {recursion!r}")
        self.params = params
        self.recursion = recursion
        self.b = params.alphas
        self.c = params.alphas + params.betas
        self.h = np.cumsum(self.c - self.b)
        self.log_k = float(np.sum(gammaln(self.c) - gammaln(self.b)))
        self._sigma = None

    def coefficients(self, n):
        if self._sigma is not None and self._sigma.size >= n:
            return self._sigma[:n]
        r = np.arange(n, dtype=float)
        sigma = np.zeros(n)
        sigma[0] = np.exp(-gammaln(self.h[0]))
        s = np.arange(n, dtype=float)
        for j in range(1, self.b.size):
            a = self.c[j] - self.b[j - 1]
            if self.recursion == "printed":
                w = a * np.exp(-gammaln(s + 1))
            elif a > 0:
                w = np.exp(gammaln(a + s) - gammaln(a) - gammaln(s + 1))
            else:
                w = _rising_over_factorial(a, n)
            ratio = np.exp(gammaln(self.h[j - 1] + r) - gammaln(self.h[j] + r))
            sigma = ratio * fftconvolve(w, sigma)[:n]
        self._sigma = sigma
        return sigma

    def density(self, v, tol=1e-12, max_terms=200_000):
        if not 0.0 < v < 1.0:
            raise ValueError("v must lie in (0, 1)")
        n = 256
        x = 1.0 - v
        while True:
            sigma = self.coefficients(n)
            terms = sigma * np.exp(np.arange(n) * np.log(x))
            partial = np.cumsum(terms)
            small = np.abs(terms[-8:]) < tol * np.abs(partial[-8:])
            if small.all() and abs(terms[-1]) <= abs(terms[-2]):
                total = partial[-1]
                break
            if n >= max_terms:
                raise SeriesError(f"series not converged after {n} terms at v={v}",
                                  partial=self._scale(v, partial[-1]))
            n = min(2 * n, max_terms)
        return self._scale(v, total)

    def _scale(self, v, total):
        logpre = self.log_k + (self.b[-1] - 1) * np.log(v) + (self.h[-1] - 1) * np.log1p(-v)
        return float(np.exp(logpre) * total)

    def cdf(self, v, tol=1e-12, max_terms=200_000):
        """P(V <= v) as one minus the integral of the density over (v, 1)."""
        if v >= 1.0:
            return 1.0
        if v <= 0.0:
            return 0.0
        with warnings.catch_warnings():
            # roundoff warnings near the tolerance floor; accuracy is far below MC noise
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            upper, _ = integrate.quad(lambda t: self.density(t, tol, max_terms), v, 1.0,
                                      epsabs=1e-12, epsrel=1e-10, limit=200)
        return float(min(max(1.0 - upper, 0.0), 1.0))


def _rising_over_factorial(a, n):
    w = np.empty(n)
    w[0] = 1.0
    for s in range(1, n):
        w[s] = w[s - 1] * (a + s - 1) / s
    return w


@lru_cache(maxsize=64)
def _series(params: BetaProductParams, recursion):
    return TangSeries(params, recursion)


def v_density_tang(v, params: BetaProductParams, tol=1e-12, max_terms=200_000, recursion="pochhammer"):
    return _series(params, recursion).density(v, tol, max_terms)


def v_pvalue_exact(v_obs, params: BetaProductParams, engine="mc", n_draws=MC_DRAWS, seed=MC_SEED):
    """P(V <= v_obs) under the Gaussian null; returns ``(pvalue, notes)``."""
    if not 0.0 < v_obs <= 1.0:
        raise ValueError("V must lie in (0, 1]")
    if v_obs >= 1.0:
        return 1.0, []
    if engine == "mc":
        null = _sorted_null(params, n_draws, seed)
        return float(np.searchsorted(null, v_obs, side="right") / null.size), []
    if engine == "series":
        try:
            return _series(params, "pochhammer").cdf(v_obs), []
        except SeriesError as exc:
            p, _ = v_pvalue_exact(v_obs, params, "mc", n_draws, seed)
            return p, [f"series engine failed ({exc}); Monte Carlo p-value used"]
    raise ValueError(f"unknown engine {engine!r}")


def gaussian_exact_test(sigma, part: BlockPartition, q, engine="mc") -> TestResult:
    """Exact test that the tested blocks are independent given the conditioning block."""
    a_cond = conditional_scatter(sigma, part)
    v = v_statistic(a_cond, part)
    params = beta_product_params(q, part)
    p, notes = v_pvalue_exact(v, params, engine)
    return TestResult(EXACT, v, p, part, null_params=params, engine=engine, diagnostics=notes)


# ---------------------------------------------------------------------------
# asymptotic elliptical test

def estimate_kappa(rows, a_cond) -> float:
    """Plug-in kurtosis parameter from centred rows and their scatter estimate."""
    x = np.atleast_2d(np.asarray(rows, dtype=float))
    a = np.atleast_2d(np.asarray(a_cond, dtype=float))
    p = a.shape[0]
    if x.shape[1] != p:
        raise SpecError("rows and scatter dimensions differ")
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("scatter estimate is singular") from None
    u = np.sum(np.linalg.solve(chol, x.T) ** 2, axis=0)
    return float(np.mean(u**2) / (p * (p + 2)) - 1.0)


def elliptical_statistic(a_cond, part: BlockPartition, q):
    a = np.asarray(a_cond, dtype=float)
    if a.shape != (part.tested_dim, part.tested_dim):
        raise SpecError(f"matrix shape {a.shape} does not match blocks {part.sizes}")
    off = part.offsets()
    stat = 0.0
    f = 0
    for i in range(1, len(part.sizes)):
        dbar, lo, hi = off[i], off[i], off[i + 1]
        prev = a[:dbar, :dbar]
        cross = a[lo:hi, :dbar]
        h = (q - 1) * cross @ np.linalg.solve(prev, cross.T)
        g = (q - 1) * a[lo:hi, lo:hi] - h
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("degenerate regression block") from None
        stat -= q * (_logdet(g) - _logdet(g + h))
        f += dbar * part.sizes[i]
    return max(stat, 0.0), f


def elliptical_test(a_cond, part: BlockPartition, q, kappa) -> TestResult:
    """Asymptotic test: the statistic is referred to ``(1 + kappa) chi2_f``."""
    if not kappa > -1:
        raise SpecError("kurtosis parameter must exceed -1")
    stat, f = elliptical_statistic(a_cond, part, q)
    p = float(chi2.sf(stat / (1.0 + kappa), f))
    return TestResult(ELLIPTICAL, stat, p, part, f=f, kappa=float(kappa))


# ---------------------------------------------------------------------------
# calibration and multiplicity

def kolmogorov_sf(t, terms=100):
    """Asymptotic Kolmogorov tail ``2 sum (-1)^(j-1) exp(-2 j^2 t^2)``."""
    if t <= 0:
        return 1.0
    total, prev = 0.0, 0.0
    sign = 1.0
    for j in range(1, terms + 1):
        term = sign * 2.0 * np.exp(-2.0 * j * j * t * t)
        total += term
        if abs(term) <= 1e-3 * abs(prev) or abs(term) <= 1e-12 * abs(total):
            return float(min(max(total, 0.0), 1.0))
        sign, prev = -sign, term
    return 1.0


def ks_uniform_test(pvalues):
    """One-sample KS test of Uniform(0, 1); returns ``(D, p)``."""
    x = np.sort(np.asarray(pvalues, dtype=float).ravel())
    n = x.size
    if n < 5:
        raise ValueError("need at least 5 values")
    if np.any((x < 0) | (x > 1)) or np.any(~np.isfinite(x)):
        raise ValueError("values must lie in [0, 1]")
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))
    rn = np.sqrt(n)
    return d, kolmogorov_sf(d * (rn + 0.12 + 0.11 / rn))


def adjust_pvalues(p, correction="holm"):
    p = np.asarray(p, dtype=float)
    m = p.size
    if correction == "none" or m == 0:
        return p.copy()
    if correction == "bonferroni":
        return np.minimum(p * m, 1.0)
    if correction == "holm":
        order = np.argsort(p, kind="stable")
        adj = np.maximum.accumulate((m - np.arange(m)) * p[order])
        out = np.empty(m)
        out[order] = np.minimum(adj, 1.0)
        return out
    raise ValueError(f"unknown correction {correction!r}")


def pairwise_edge_tests(sigma, q, method="gaussian", alpha=0.05, correction="holm", kappa=None, engine="mc"):
    """Test each pair of coordinates for un-correlation given all the others.

    Returns ``(raw, adjusted, adjacency)`` as ``d x d`` arrays with unit
    diagonal p-values and an all-false adjacency diagonal.
    """
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    if d < 2:
        raise SpecError("need at least two coordinates")
    if method == "elliptical" and kappa is None:
        raise SpecError("elliptical method needs a kurtosis estimate")
    pairs = list(itertools.combinations(range(d), 2))
    raw = []
    for i, j in pairs:
        rest = [k for k in range(d) if k not in (i, j)]
        part = BlockPartition((1, 1), len(rest))
        arranged = arrange(sigma, [i, j], rest)
        if method == "gaussian":
            res = gaussian_exact_test(arranged, part, q, engine)
        elif method == "elliptical":
            res = elliptical_test(conditional_scatter(arranged, part), part, q, kappa)
        else:
            raise ValueError(f"unknown method {method!r}")
        raw.append(res.pvalue)
    adj = adjust_pvalues(raw, correction)
    raw_m = np.ones((d, d))
    adj_m = np.ones((d, d))
    for (i, j), p, pa in zip(pairs, raw, adj):
        raw_m[i, j] = raw_m[j, i] = p
        adj_m[i, j] = adj_m[j, i] = pa
    adjacency = adj_m < alpha
    np.fill_diagonal(adjacency, False)
    return raw_m, adj_m, adjacency
