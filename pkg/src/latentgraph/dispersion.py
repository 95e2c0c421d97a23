"""Dispersion-model response families and MGLMM simulation.

Each margin ``j`` has conditional density ``a(y; lam) * exp(-d(y; mu) / (2 lam))``
with ``g(mu) = x' beta + b`` and ``b`` the cluster's random component.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, xlogy

from .elliptical import EllipticalSpec, SpecError, make_rng, sample_elliptical

POISSON = "poisson"
GAMMA = "gamma"
BINOMIAL = "binomial"
GAUSSIAN = "gaussian"
FAMILIES = (POISSON, GAMMA, BINOMIAL, GAUSSIAN)
LINKS = ("log", "logit", "identity")


@dataclass(frozen=True)
class MarginSpec:
    family: str
    link: str
    beta: np.ndarray
    dispersion: float = 1.0
    trials: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.link not in LINKS:
            raise SpecError(f"unknown link {self.link!r}")
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not self.dispersion > 0:
            raise SpecError("dispersion must be positive")
        if self.family in (POISSON, BINOMIAL) and self.dispersion != 1.0:
            raise SpecError(f"{self.family} requires dispersion 1")
        if self.family == BINOMIAL and self.link not in ("logit", "log"):
            raise SpecError("binomial requires logit or log link")
        if self.family in (POISSON, GAMMA) and self.link != "log":
            # identity would let mu leave (0, inf)
            raise SpecError(f"{self.family} requires log link")
        if self.trials < 1:
            raise SpecError("binomial trials must be >= 1")

    def to_dict(self):
        out = {"family": self.family, "link": self.link, "beta": self.beta.tolist(),
               "dispersion": self.dispersion}
        if self.family == BINOMIAL:
            out["trials"] = self.trials
        return out

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(obj["family"], obj.get("link", "log"), obj["beta"],
                       float(obj.get("dispersion", 1.0)), int(obj.get("trials", 1)))
        except KeyError as exc:
            raise SpecError(f"margin spec missing key {exc}") from None


@dataclass(frozen=True)
class MglmmSpec:
    """Margins, cluster count, replicates per cluster and the random-component law.

    ``covariates`` is ``None`` for an intercept-only design, otherwise a
    ``(q * replicates, p)`` table shared by all margins, ordered by cluster
    then replicate.
    """

    margins: tuple
    q: int
    replicates: int
    random_components: EllipticalSpec
    covariates: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "margins", tuple(self.margins))
        if self.random_components.dim != len(self.margins):
            raise SpecError("random component dimension must equal the number of margins")
        if self.q < 2:
            raise SpecError("q must be at least 2")
        if self.replicates < 1:
            raise SpecError("replicates must be at least 1")
        n = self.q * self.replicates
        p = self.design().shape[1]
        for j, m in enumerate(self.margins):
            if m.beta.size != p:
                raise SpecError(f"margin {j + 1}: beta has {m.beta.size} entries, design has {p} columns")
        if self.covariates is not None and self.covariates.shape[0] != n:
            raise SpecError(f"covariate table needs {n} rows, got {self.covariates.shape[0]}")

    @property
    def dim(self):
        return len(self.margins)

    def design(self):
        if self.covariates is None:
            return np.ones((self.q * self.replicates, 1))
        return np.asarray(self.covariates, dtype=float)

    def with_q(self, q):
        return MglmmSpec(self.margins, q, self.replicates, self.random_components, None)

    def to_dict(self):
        return {"margins": [m.to_dict() for m in self.margins], "q": self.q,
                "replicates": self.replicates, "random_components": self.random_components.to_dict()}

    @classmethod
    def from_dict(cls, obj, covariates=None):
        try:
            margins = [MarginSpec.from_dict(m) for m in obj["margins"]]
            rc = EllipticalSpec.from_dict(obj["random_components"])
            return cls(margins, int(obj["q"]), int(obj.get("replicates", 1)), rc, covariates)
        except KeyError as exc:
            raise SpecError(f"model spec missing key {exc}") from None
        except TypeError as exc:
            raise SpecError(f"malformed model spec: {exc}") from None


@dataclass
class LongDataset:
    """Long-format responses; ``margin`` and ``cluster`` are 0-based here."""

    margin: np.ndarray
    cluster: np.ndarray
    y: np.ndarray
    x: np.ndarray = field(repr=False)

    def __len__(self):
        return self.y.size

    @property
    def n_margins(self):
        return int(self.margin.max()) + 1

    @property
    def n_clusters(self):
        return int(self.cluster.max()) + 1

    def select(self, j):
        keep = self.margin == j
        return self.cluster[keep], self.y[keep], self.x[keep]

    def check_complete(self):
        d, q = self.n_margins, self.n_clusters
        seen = np.zeros((d, q), dtype=bool)
        seen[self.margin, self.cluster] = True
        if not seen.all():
            j, c = np.argwhere(~seen)[0]
            raise SpecError(f"cluster {c + 1} missing from margin {j + 1}")

    def write_csv(self, path):
        p = self.x.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["margin", "cluster", "y"] + [f"x{k + 1}" for k in range(p)])
            for j, c, y, xr in zip(self.margin, self.cluster, self.y, self.x):
                w.writerow([j + 1, c + 1, repr(float(y))] + [repr(float(v)) for v in xr])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:3] != ["margin", "cluster", "y"]:
            raise SpecError(f"{path}: expected header margin,cluster,y,x1,...")
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        if body.size == 0:
            raise SpecError(f"{path}: no data rows")
        x = body[:, 3:] if body.shape[1] > 3 else np.ones((body.shape[0], 1))
        return cls(body[:, 0].astype(int) - 1, body[:, 1].astype(int) - 1, body[:, 2], x)


# ---------------------------------------------------------------------------
# family functions

def _check_mean(family, mu, trials=1):
    mu = np.asarray(mu, dtype=float)
    if family in (POISSON, GAMMA) and np.any(mu <= 0):
        raise ValueError(f"{family} mean must be positive")
    if family == BINOMIAL and np.any((mu <= 0) | (mu >= trials)):
        raise ValueError("binomial mean must lie in (0, trials)")
    return mu


def unit_deviance(family, y, mu, trials=1):
    y = np.asarray(y, dtype=float)
    mu = _check_mean(family, mu, trials)
    if family == POISSON:
        out = 2.0 * (xlogy(y, y) - xlogy(y, mu) - y + mu)
    elif family == GAMMA:
        out = 2.0 * ((y - mu) / mu - np.log(y / mu))
    elif family == GAUSSIAN:
        out = (y - mu) ** 2
    elif family == BINOMIAL:
        m = trials
        out = 2.0 * (xlogy(y, y) - xlogy(y, mu) + xlogy(m - y, m - y) - xlogy(m - y, m - mu))
    else:
        raise SpecError(f"unknown family {family!r}")
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def log_normaliser(margin: MarginSpec, y):
    """log a(y; lam) for the margin's family."""
    y = np.asarray(y, dtype=float)
    lam = margin.dispersion
    if margin.family == POISSON:
        return xlogy(y, y) - y - gammaln(y + 1.0)
    if margin.family == GAMMA:
        k = 1.0 / lam
        return k * np.log(k) - np.log(y) - k - gammaln(k)
    if margin.family == GAUSSIAN:
        return -0.5 * np.log(2.0 * np.pi * lam) + 0.0 * y
    m = margin.trials
    return (gammaln(m + 1.0) - gammaln(y + 1.0) - gammaln(m - y + 1.0)
            + xlogy(y, y / m) + xlogy(m - y, (m - y) / m))


def log_conditional_density(margin: MarginSpec, y, mu):
    dev = unit_deviance(margin.family, y, mu, margin.trials)
    return log_normaliser(margin, y) - dev / (2.0 * margin.dispersion)


def conditional_density(margin: MarginSpec, y, mu):
    out = np.exp(log_conditional_density(margin, y, mu))
    return float(out) if np.ndim(out) == 0 else out


def variance_function(family, mu, trials=1):
    mu = _check_mean(family, mu, trials)
    if family == POISSON:
        out = mu
    elif family == GAMMA:
        out = mu**2
    elif family == GAUSSIAN:
        out = np.ones_like(mu)
    elif family == BINOMIAL:
        out = mu * (1.0 - mu / trials)
    else:
        raise SpecError(f"unknown family {family!r}")
    return float(out) if out.ndim == 0 else out


def _variance_derivative(family, mu, trials=1):
    if family == POISSON:
        return np.ones_like(mu)
    if family == GAMMA:
        return 2.0 * mu
    if family == GAUSSIAN:
        return np.zeros_like(mu)
    return 1.0 - 2.0 * mu / trials


def apply_inverse_link(link, eta, trials=1):
    """Mean for linear predictor ``eta``; the logit link is scaled by ``trials``."""
    eta = np.asarray(eta, dtype=float)
    if link == "log":
        out = np.exp(eta)
    elif link == "logit":
        out = trials * expit(eta)
    elif link == "identity":
        out = eta.copy()
    else:
        raise SpecError(f"unknown link {link!r}")
    return float(out) if out.ndim == 0 else out


def inverse_link_derivatives(link, eta, trials=1):
    """Return ``(mu, dmu/deta, d2mu/deta2)``."""
    eta = np.asarray(eta, dtype=float)
    if link == "log":
        mu = np.exp(eta)
        return mu, mu, mu
    if link == "logit":
        p = expit(eta)
        d1 = trials * p * (1.0 - p)
        return trials * p, d1, d1 * (1.0 - 2.0 * p)
    return eta.copy(), np.ones_like(eta), np.zeros_like(eta)


def loglik_eta_derivatives(margin: MarginSpec, y, eta):
    """First and second derivatives of ``log f(y | eta)`` with respect to ``eta``.

    Uses ``dl/dmu = (y - mu) / (lam V(mu))`` which holds for all supported
    families.
    """
    mu, m1, m2 = inverse_link_derivatives(margin.link, eta, margin.trials)
    lam = margin.dispersion
    v = variance_function(margin.family, mu, margin.trials)
    v = np.atleast_1d(v)
    dv = _variance_derivative(margin.family, np.atleast_1d(mu), margin.trials)
    resid = y - mu
    l1 = resid / (lam * v)
    l2 = -1.0 / (lam * v) - resid * dv / (lam * v**2)
    return l1 * m1, l2 * m1**2 + l1 * m2


def sample_response(margin: MarginSpec, mu, rng):
    mu = np.asarray(mu, dtype=float)
    lam = margin.dispersion
    if margin.family == POISSON:
        return rng.poisson(mu).astype(float)
    if margin.family == GAMMA:
        return rng.gamma(1.0 / lam, lam * mu)
    if margin.family == GAUSSIAN:
        return rng.normal(mu, np.sqrt(lam))
    return rng.binomial(margin.trials, mu / margin.trials).astype(float)


def simulate_mglmm(spec: MglmmSpec, seed=0, stream=()):
    """Simulate a long dataset and return it with the latent ``q x d`` matrix.

    Random components come from stream ``(seed, *stream, 0)``; responses of
    margin ``j`` from stream ``(seed, *stream, 1, j)``.
    """
    stream = tuple(stream)
    b = sample_elliptical(spec.random_components, spec.q, make_rng(seed, *stream, 0))
    x = spec.design()
    clusters = np.repeat(np.arange(spec.q), spec.replicates)
    parts = []
    for j, m in enumerate(spec.margins):
        eta = x @ m.beta + b[clusters, j]
        mu = apply_inverse_link(m.link, eta, m.trials)
        y = sample_response(m, np.atleast_1d(mu), make_rng(seed, *stream, 1, j))
        parts.append((np.full(clusters.size, j), clusters, y, x))
    data = LongDataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
    )
    return data, b
