"""Random-component prediction and covariance / scatter estimation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .dispersion import LongDataset, MarginSpec, log_conditional_density, loglik_eta_derivatives, inverse_link_derivatives, variance_function
from .elliptical import GAUSSIAN, EllipticalSpec, SpecError, log_density_elliptical

DIVISORS = ("q-1", "q")


class EstimationError(RuntimeError):
    """Numerical failure in prediction or likelihood maximisation."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class BlockPartition:
    """Sizes of the tested blocks followed by the size of the conditioning block."""

    sizes: tuple
    cond_size: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise SpecError("block sizes must be positive integers")
        if self.cond_size < 0:
            raise SpecError("conditioning block size must be >= 0")
        object.__setattr__(self, "sizes", sizes)

    @property
    def tested_dim(self):
        return sum(self.sizes)

    @property
    def total_dim(self):
        return self.tested_dim + self.cond_size

    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    def to_dict(self):
        return {"sizes": list(self.sizes), "cond_size": self.cond_size}


def sample_covariance(data, divisor="q-1") -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    q = x.shape[0]
    if q < 2:
        raise ValueError("sample covariance needs at least 2 rows")
    if divisor not in DIVISORS:
        raise ValueError(f"divisor must be one of {DIVISORS}")
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (q - 1 if divisor == "q-1" else q)


def arrange(matrix, coords, cond=()):
    """Reorder a covariance so the tested ``coords`` come first, then ``cond``."""
    idx = list(coords) + list(cond)
    if len(set(idx)) != len(idx):
        raise SpecError("tested and conditioning coordinates overlap")
    m = np.asarray(matrix, dtype=float)
    return m[np.ix_(idx, idx)]


def conditional_scatter(scatter, part: BlockPartition) -> np.ndarray:
    """Schur complement of the trailing conditioning block."""
    lam = np.asarray(scatter, dtype=float)
    if lam.shape != (part.total_dim, part.total_dim):
        raise SpecError(f"scatter shape {lam.shape} does not match partition of dimension {part.total_dim}")
    p = part.tested_dim
    if part.cond_size == 0:
        return lam.copy()
    top, cross, cond = lam[:p, :p], lam[:p, p:], lam[p:, p:]
    try:
        chol = np.linalg.cholesky(cond)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("conditioning block is singular") from None
    w = np.linalg.solve(chol, cross.T)
    out = top - w.T @ w
    return 0.5 * (out + out.T)


def conditional_residuals(rows, part: BlockPartition):
    """Residuals of the tested coordinates after regressing on the conditioning ones."""
    x = np.asarray(rows, dtype=float)
    x = x - x.mean(axis=0)
    p = part.tested_dim
    if part.cond_size == 0:
        return x[:, :p]
    coef, *_ = np.linalg.lstsq(x[:, p:], x[:, :p], rcond=None)
    return x[:, :p] - x[:, p:] @ coef


# ---------------------------------------------------------------------------
# prediction

@dataclass
class PredictionSet:
    bhat: np.ndarray
    cond_var: np.ndarray

    def __post_init__(self):
        self.bhat = np.atleast_2d(np.asarray(self.bhat, dtype=float))
        self.cond_var = np.atleast_2d(np.asarray(self.cond_var, dtype=float))
        if self.bhat.shape != self.cond_var.shape:
            raise SpecError("bhat and cond_var shapes differ")
        if not np.all(self.cond_var > 0):
            raise SpecError("conditional variances must be positive")

    @property
    def q(self):
        return self.bhat.shape[0]

    @property
    def dim(self):
        return self.bhat.shape[1]

    def write_csv(self, path):
        d = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster"] + [f"b{j + 1}" for j in range(d)] + [f"v{j + 1}" for j in range(d)])
            for c in range(self.q):
                w.writerow([c + 1] + [repr(float(v)) for v in self.bhat[c]] + [repr(float(v)) for v in self.cond_var[c]])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if not rows or rows[0][0] != "cluster":
            raise SpecError(f"{path}: expected header cluster,b1,...,bd,v1,...,vd")
        ncol = len(rows[0]) - 1
        if ncol % 2 or ncol == 0:
            raise SpecError(f"{path}: odd number of b/v columns")
        body = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
        if body.shape[0] < 1:
            raise SpecError(f"{path}: no data rows")
        d = ncol // 2
        return cls(body[:, :d], body[:, d:])


def _cluster_objective(margin, y, eta, cluster, q, b, sigma2):
    mu = inverse_link_derivatives(margin.link, eta + b[cluster], margin.trials)[0]
    ll = np.bincount(cluster, weights=log_conditional_density(margin, y, mu), minlength=q)
    return ll - 0.5 * b**2 / sigma2


def cluster_modes(margin: MarginSpec, y, eta, cluster, q, sigma2, max_iter=100, label=""):
    """Per-cluster posterior modes of ``b`` under a N(0, sigma2) prior.

    ``eta`` is the fixed-effect linear predictor of each observation.  Returns
    ``(modes, curvature_variances)``; the latter are the inverse negative
    second derivatives at the modes.
    """
    b = np.zeros(q)
    obj = _cluster_objective(margin, y, eta, cluster, q, b, sigma2)
    active = np.ones(q, dtype=bool)
    for _ in range(max_iter):
        l1, l2 = loglik_eta_derivatives(margin, y, eta + b[cluster])
        grad = np.bincount(cluster, weights=l1, minlength=q) - b / sigma2
        hess = np.bincount(cluster, weights=l2, minlength=q) - 1.0 / sigma2
        bad = hess >= 0
        if bad.any():
            hess[bad] = _fisher_hessian(margin, eta, cluster, q, b, sigma2)[bad]
        step = np.clip(-grad / hess, -5.0, 5.0)
        step[~active] = 0.0
        t = np.ones(q)
        for _ in range(40):
            trial = b + t * step
            new = _cluster_objective(margin, y, eta, cluster, q, trial, sigma2)
            worse = new < obj - 1e-12 * (1.0 + np.abs(obj))
            if not worse.any():
                break
            t[worse] *= 0.5
        b = b + t * step
        obj = _cluster_objective(margin, y, eta, cluster, q, b, sigma2)
        active = np.abs(t * step) > 1e-11 * (1.0 + np.abs(b))
        if not active.any():
            break
    else:
        c = int(np.flatnonzero(active)[0])
        raise EstimationError(f"Newton did not converge for {label}cluster {c + 1}")
    l1, l2 = loglik_eta_derivatives(margin, y, eta + b[cluster])
    hess = np.bincount(cluster, weights=l2, minlength=q) - 1.0 / sigma2
    bad = hess >= 0
    if bad.any():
        hess[bad] = _fisher_hessian(margin, eta, cluster, q, b, sigma2)[bad]
    return b, -1.0 / hess


def _fisher_hessian(margin, eta, cluster, q, b, sigma2):
    mu, m1, _ = inverse_link_derivatives(margin.link, eta + b[cluster], margin.trials)
    info = m1**2 / (margin.dispersion * variance_function(margin.family, mu, margin.trials))
    return -np.bincount(cluster, weights=info, minlength=q) - 1.0 / sigma2


def fit_fixed_effects(margin: MarginSpec, y, x, max_iter=100):
    """Margin-wise maximum likelihood for beta, ignoring random effects (Fisher scoring)."""
    beta = np.zeros(x.shape[1])
    if margin.link == "log":
        beta[0] = np.log(max(np.mean(y), 1e-8)) if np.all(x[:, 0] == 1) else 0.0
    elif margin.link == "logit":
        p = np.clip(np.mean(y) / margin.trials, 1e-6, 1 - 1e-6)
        beta[0] = np.log(p / (1 - p)) if np.all(x[:, 0] == 1) else 0.0
    else:
        beta, *_ = np.linalg.lstsq(x, y, rcond=None)
        return beta
    for _ in range(max_iter):
        eta = x @ beta
        mu, m1, _ = inverse_link_derivatives(margin.link, eta, margin.trials)
        l1, _ = loglik_eta_derivatives(margin, y, eta)
        w = m1**2 / (margin.dispersion * variance_function(margin.family, mu, margin.trials))
        step = np.linalg.solve(x.T @ (w[:, None] * x), x.T @ l1)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-12 * (1 + np.max(np.abs(beta))):
            break
    return beta


def _initial_sigma2(margin, y, eta, cluster, q):
    # moment estimate from per-cluster working residuals
    mu, m1, _ = inverse_link_derivatives(margin.link, eta, margin.trials)
    z = (y - mu) / m1
    noise = margin.dispersion * variance_function(margin.family, mu, margin.trials) / m1**2
    n = np.bincount(cluster, minlength=q)
    zbar = np.bincount(cluster, weights=z, minlength=q) / n
    within = np.bincount(cluster, weights=noise, minlength=q) / n**2
    return max(np.var(zbar, ddof=1) - np.mean(within), 1e-4)


def predict_random_components(data: LongDataset, margins, moment_iterations=2) -> PredictionSet:
    """Two-stage margin-wise Laplace predictor of the random components.

    For each margin: fixed effects by maximum likelihood without random
    effects, a moment estimate of the random-effect variance refined
    ``moment_iterations`` times, then per-cluster posterior modes.
    """
    data.check_complete()
    d, q = data.n_margins, data.n_clusters
    if len(margins) != d:
        raise SpecError(f"data has {d} margins, model has {len(margins)}")
    bhat = np.empty((q, d))
    cond_var = np.empty((q, d))
    for j, margin in enumerate(margins):
        cluster, y, x = data.select(j)
        beta = fit_fixed_effects(margin, y, x)
        eta = x @ beta
        sigma2 = _initial_sigma2(margin, y, eta, cluster, q)
        label = f"margin {j + 1}, "
        for _ in range(moment_iterations):
            b, v = cluster_modes(margin, y, eta, cluster, q, sigma2, label=label)
            sigma2 = max(np.mean(b**2 + v), 1e-6)
        bhat[:, j], cond_var[:, j] = cluster_modes(margin, y, eta, cluster, q, sigma2, label=label)
    return PredictionSet(bhat, cond_var)


def covariance_from_predictions(preds: PredictionSet, divisor="q-1") -> np.ndarray:
    return sample_covariance(preds.bhat, divisor)


# ---------------------------------------------------------------------------
# approximate maximum likelihood

def gauss_hermite_rule(l: int):
    """Physicists' Gauss-Hermite nodes and weights by Golub-Welsch."""
    if not 1 <= l <= 100:
        raise ValueError("node count must lie in [1, 100]")
    off = np.sqrt(np.arange(1, l) / 2.0)
    jacobi = np.diag(off, 1) + np.diag(off, -1)
    nodes, vecs = np.linalg.eigh(jacobi)
    weights = np.sqrt(np.pi) * vecs[0] ** 2
    nodes = 0.5 * (nodes - nodes[::-1])  # exact symmetry
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights


@dataclass
class MLEstimate:
    matrix: np.ndarray
    loglik: float
    init_loglik: float
    evaluations: int


def _centred(preds: PredictionSet):
    # the fixed-effect intercept absorbs any common shift of the predictions
    return preds.bhat - preds.bhat.mean(axis=0)


def gaussian_loglik(sigma, bhat, cond_var) -> float:
    """Closed-form log-likelihood: each prediction is N(0, sigma + V_j)."""
    sigma = np.asarray(sigma, dtype=float)
    total = sigma[None, :, :] + cond_var[:, :, None] * np.eye(sigma.shape[0])[None]
    chol = np.linalg.cholesky(total)
    sol = np.linalg.solve(chol, bhat[:, :, None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    d = sigma.shape[0]
    return float(np.sum(-0.5 * d * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * np.sum(sol**2, axis=1)))


def quadrature_loglik(sigma, bhat, cond_var, family: EllipticalSpec, l=20, chunk=50_000) -> float:
    """Log-likelihood with the integral over each random component replaced by a
    tensor Gauss-Hermite rule of ``l`` nodes per axis."""
    d = bhat.shape[1]
    nodes, weights = gauss_hermite_rule(l)
    grid = np.stack(np.meshgrid(*([nodes] * d), indexing="ij"), axis=-1).reshape(-1, d)
    logw = np.sum(np.log(np.stack(np.meshgrid(*([weights] * d), indexing="ij"), axis=-1).reshape(-1, d)), axis=1)
    sd = np.sqrt(2.0 * cond_var)
    per = max(1, chunk // grid.shape[0])
    total = 0.0
    for start in range(0, bhat.shape[0], per):
        b = bhat[start:start + per]
        pts = b[:, None, :] + sd[start:start + per, None, :] * grid[None, :, :]
        logphi = log_density_elliptical(family, pts, scatter=sigma)
        total += float(np.sum(logsumexp(logw[None, :] + logphi, axis=1)))
    return total - 0.5 * d * np.log(np.pi) * bhat.shape[0]


def _to_params(matrix):
    chol = np.linalg.cholesky(matrix)
    d = chol.shape[0]
    idx = np.tril_indices(d)
    vals = chol[idx].copy()
    diag = idx[0] == idx[1]
    vals[diag] = np.log(vals[diag])
    return vals


def _from_params(theta, d):
    idx = np.tril_indices(d)
    chol = np.zeros((d, d))
    vals = np.array(theta, dtype=float)
    diag = idx[0] == idx[1]
    vals[diag] = np.exp(np.clip(vals[diag], -40, 40))
    chol[idx] = vals
    return chol @ chol.T


def _maximise(loglik, init, tol=1e-10, max_iter=20_000):
    d = init.shape[0]

    def neg(theta):
        try:
            val = loglik(_from_params(theta, d))
        except np.linalg.LinAlgError:
            return np.inf
        return -val if np.isfinite(val) else np.inf

    theta0 = _to_params(init)
    f0 = neg(theta0)
    opts = {"xatol": 1e-9, "fatol": tol, "maxiter": max_iter, "maxfev": 4 * max_iter, "adaptive": d > 2}
    res = minimize(neg, theta0, method="Nelder-Mead", options=opts)
    res2 = minimize(neg, res.x, method="Nelder-Mead", options=opts)
    best = res2 if res2.fun <= res.fun else res
    sigma = _from_params(best.x, d)
    if not (res2.success or abs(res2.fun - res.fun) <= 1e-8 * (1 + abs(res.fun))):
        raise EstimationError("optimizer stagnated before convergence", best=sigma)
    eig = np.linalg.eigvalsh(sigma)
    if eig[0] < 1e-7 * max(eig[-1], 1e-300) or eig[-1] < 1e-12:
        raise EstimationError("likelihood unbounded toward singular Σ", best=sigma)
    return MLEstimate(sigma, -best.fun, -f0, res.nfev + res2.nfev)


def _default_init(bhat, cond_var):
    s = bhat.T @ bhat / bhat.shape[0] - np.diag(cond_var.mean(axis=0))
    eig, vec = np.linalg.eigh(0.5 * (s + s.T))
    floor = 0.05 * max(np.mean(np.diag(bhat.T @ bhat)) / bhat.shape[0], 1e-6)
    return (vec * np.maximum(eig, floor)) @ vec.T


def gaussian_approx_ml(preds: PredictionSet, init=None) -> MLEstimate:
    """Approximate ML for the covariance of Gaussian random components."""
    bhat = _centred(preds)
    if np.allclose(bhat, 0.0):
        raise EstimationError("likelihood unbounded toward singular Σ")
    init = _default_init(bhat, preds.cond_var) if init is None else np.asarray(init, dtype=float)
    return _maximise(lambda s: gaussian_loglik(s, bhat, preds.cond_var), init)


def elliptical_approx_ml(preds: PredictionSet, family: EllipticalSpec, l=20, init=None) -> MLEstimate:
    """Approximate ML for the scatter matrix of elliptical random components.

    ``family`` supplies the generator (and ``nu``); its scatter is ignored.
    """
    d = preds.dim
    if family.dim != d:
        family = EllipticalSpec(family.family, np.eye(d), family.nu)
    if l < 5:
        raise ValueError("use at least 5 quadrature nodes")
    if l**d >= 1_000_000:
        raise ValueError(f"grid too large: {l}^{d} quadrature points")
    bhat = _centred(preds)
    if np.allclose(bhat, 0.0):
        raise EstimationError("likelihood unbounded toward singular Σ")
    if init is None:
        init = _default_init(bhat, preds.cond_var)
        if family.family != GAUSSIAN:
            init = init * (family.nu - 2.0) / family.nu
    init = np.asarray(init, dtype=float)
    return _maximise(lambda s: quadrature_loglik(s, bhat, preds.cond_var, family, l), init)
