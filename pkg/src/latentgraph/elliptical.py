"""Elliptically contoured laws for the cluster-level random components.

Only the two generators used in practice are supported: the Gaussian and the
multivariate Student-t.  Both are centred at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

GAUSSIAN = "gaussian"
STUDENT_T = "t"

_LOG_2PI = np.log(2.0 * np.pi)


class SpecError(ValueError):
    """Raised for invalid model or distribution specifications."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator: one independent stream per ``(seed, *stream)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream)))


def check_scatter(matrix, name="scatter"):
    """Return ``matrix`` as a float array after checking it is symmetric PD."""
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SpecError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise SpecError(f"{name} not symmetric")
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SpecError(f"{name} not positive definite") from None
    return a


@dataclass(frozen=True)
class EllipticalSpec:
    """Zero-location elliptical law with scatter matrix ``scatter``.

    For ``family="t"`` the scatter is stored as given; the covariance is
    ``nu / (nu - 2) * scatter``.
    """

    family: str
    scatter: np.ndarray
    nu: float | None = None
    dim: int = field(init=False)

    def __post_init__(self):
        if self.family not in (GAUSSIAN, STUDENT_T):
            raise SpecError(f"unknown elliptical family {self.family!r}")
        object.__setattr__(self, "scatter", check_scatter(self.scatter))
        object.__setattr__(self, "dim", self.scatter.shape[0])
        if self.family == STUDENT_T:
            if self.nu is None or not self.nu > 4:
                raise SpecError("t family requires nu > 4 (fourth moments must exist)")
            object.__setattr__(self, "nu", float(self.nu))
        else:
            object.__setattr__(self, "nu", None)

    @classmethod
    def from_covariance(cls, family, covariance, nu=None):
        """Build a spec whose *covariance* (not scatter) equals ``covariance``."""
        cov = check_scatter(covariance, "covariance")
        if family == STUDENT_T:
            if nu is None or not nu > 4:
                raise SpecError("t family requires nu > 4 (fourth moments must exist)")
            return cls(family, cov * (nu - 2.0) / nu, nu)
        return cls(family, cov, nu)

    @property
    def covariance(self) -> np.ndarray:
        if self.family == STUDENT_T:
            return self.scatter * self.nu / (self.nu - 2.0)
        return self.scatter

    def to_dict(self) -> dict:
        out = {"family": self.family, "scatter": self.scatter.tolist()}
        if self.family == STUDENT_T:
            out["nu"] = self.nu
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "EllipticalSpec":
        """Parse ``{"family": ..., "nu": ..., "scatter": [[...]]}``.

        A ``"covariance"`` key may be given instead of ``"scatter"``; it is
        converted with the family's covariance/scatter ratio.
        """
        try:
            family = obj.get("family", GAUSSIAN)
            nu = obj.get("nu")
            if "scatter" in obj:
                return cls(family, obj["scatter"], nu)
            return cls.from_covariance(family, obj["covariance"], nu)
        except KeyError as exc:
            raise SpecError(f"elliptical spec missing key {exc}") from None


def sample_elliptical(spec: EllipticalSpec, q: int, seed=0) -> np.ndarray:
    """Draw ``q`` independent rows from ``spec``.

    ``seed`` is an int or a ``numpy.random.Generator``.  Student-t rows are
    Gaussian(0, scatter) rows divided by ``sqrt(chi2_nu / nu)``.
    """
    if q < 1:
        raise SpecError("q must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    chol = np.linalg.cholesky(spec.scatter)
    z = rng.standard_normal((q, spec.dim)) @ chol.T
    if spec.family == STUDENT_T:
        w = rng.chisquare(spec.nu, size=q) / spec.nu
        z = z / np.sqrt(w)[:, None]
    return z


def log_generator(spec: EllipticalSpec, u):
    """log h(u) for the normalised density generator in dimension ``spec.dim``."""
    u = np.asarray(u, dtype=float)
    d = spec.dim
    if spec.family == GAUSSIAN:
        return -0.5 * d * _LOG_2PI - 0.5 * u
    nu = spec.nu
    const = gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu) - 0.5 * d * np.log(nu * np.pi)
    return const - 0.5 * (nu + d) * np.log1p(u / nu)


def log_density_elliptical(spec: EllipticalSpec, points, scatter=None) -> np.ndarray:
    """Vectorised log density at the rows of ``points`` (shape ``(..., d)``).

    ``scatter`` overrides ``spec.scatter`` without re-validating it; the
    likelihood optimisers use this in their inner loop.
    """
    lam = spec.scatter if scatter is None else scatter
    x = np.asarray(points, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"dimension mismatch: point has length {x.shape[-1]}, spec has {spec.dim}")
    chol = np.linalg.cholesky(lam)
    sol = np.linalg.solve(chol, x.reshape(-1, spec.dim).T)
    u = np.sum(sol**2, axis=0).reshape(x.shape[:-1])
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * logdet + log_generator(spec, u)


def density_elliptical(spec: EllipticalSpec, point) -> float:
    point = np.asarray(point, dtype=float)
    if point.shape != (spec.dim,):
        raise ValueError(f"dimension mismatch: expected a vector of length {spec.dim}")
    return float(np.exp(log_density_elliptical(spec, point)))


def theoretical_kappa(spec: EllipticalSpec) -> float:
    """Kurtosis parameter: 0 for the Gaussian, ``2 / (nu - 4)`` for Student-t."""
    if spec.family == GAUSSIAN:
        return 0.0
    if spec.nu <= 4:
        raise SpecError("kurtosis parameter undefined for nu <= 4")
    return 2.0 / (spec.nu - 4.0)
