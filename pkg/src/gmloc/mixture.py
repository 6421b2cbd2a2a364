"""Planar Gaussian and Gaussian-mixture algebra.

Everything here works on immutable values: a :class:`Gaussian2`, a weighted
:class:`GaussMix2` of planar Gaussians, and the one-dimensional
:class:`GaussMix1` produced by projecting a planar mixture onto a direction.

Rotation convention: a heading ``theta`` is measured counterclockwise from
the inertial +x axis, and ``rotation(theta)`` maps car-frame vectors into the
inertial frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect
from scipy.special import ndtr

__all__ = [
    "Gaussian2",
    "GaussMix2",
    "GaussMix1",
    "rotation",
    "unit_direction",
    "pdf",
    "logpdf",
    "condense",
    "marginalize",
    "tail_mass",
    "tail_threshold",
    "two_sided_percentile",
    "rotate_to_inertial",
    "sample",
]

EIG_FLOOR = 1e-12
MAX_CONDITION = 1e12
WEIGHT_TOL = 1e-9
LOAD_RENORM_TOL = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_cov(cov):
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance has non-finite entries")
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    eig = np.linalg.eigvalsh(cov)
    if np.any(eig < EIG_FLOOR):
        raise ValueError(f"covariance is not positive definite (min eigenvalue {eig.min():.3g})")
    return cov


def rotation(theta):
    """2x2 counterclockwise rotation by ``theta`` radians."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def unit_direction(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class Gaussian2:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.shape != (2,) or not np.all(np.isfinite(mean)):
            raise ValueError("mean must be a finite 2-vector")
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (2, 2):
            raise ValueError("cov must be 2x2")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(_check_cov(cov)))


@dataclass(frozen=True)
class GaussMix2:
    """Weighted mixture of planar Gaussians.

    Stored as stacked arrays: ``weights`` (K,), ``means`` (K, 2) and
    ``covs`` (K, 2, 2). Covariances are symmetrized on construction.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float).reshape(-1, 2)
        cov = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        if not (len(w) == len(mu) == len(cov)) or len(w) == 0:
            raise ValueError("weights, means and covs must describe at least one component")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {w.sum():.12g}, not 1")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "means", _frozen(mu))
        object.__setattr__(self, "covs", _frozen(_check_cov(cov)))

    @classmethod
    def from_components(cls, components):
        """Build from an iterable of ``(weight, Gaussian2)`` pairs."""
        components = list(components)
        return cls(
            [w for w, _ in components],
            [g.mean for _, g in components],
            [g.cov for _, g in components],
        )

    @classmethod
    def single(cls, mean, cov):
        return cls([1.0], [mean], [cov])

    @property
    def K(self):
        return len(self.weights)

    @property
    def components(self):
        return [(float(w), Gaussian2(m, c)) for w, m, c in zip(self.weights, self.means, self.covs)]

    def mean(self):
        return self.weights @ self.means

    def to_dict(self):
        return {
            "components": [
                {"w": float(w), "mean": m.tolist(), "cov": c.tolist()}
                for w, m, c in zip(self.weights, self.means, self.covs)
            ]
        }

    @classmethod
    def from_dict(cls, d):
        comps = d["components"]
        w = np.array([c["w"] for c in comps], dtype=float)
        total = w.sum()
        if abs(total - 1.0) > LOAD_RENORM_TOL:
            raise ValueError(f"mixture weights sum to {total!r}; refusing to renormalize")
        return cls(w / total, [c["mean"] for c in comps], [c["cov"] for c in comps])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GaussMix1:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_1d(np.asarray(self.means, dtype=float))
        var = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if not (w.shape == mu.shape == var.shape) or w.ndim != 1 or len(w) == 0:
            raise ValueError("weights, means and variances must be equal-length 1D arrays")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(~(var > 0)):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "means", _frozen(mu))
        object.__setattr__(self, "variances", _frozen(var))

    @property
    def stds(self):
        return np.sqrt(self.variances)

    def mean(self):
        return float(self.weights @ self.means)

    def variance(self):
        m = self.mean()
        return float(self.weights @ (self.variances + (self.means - m) ** 2))


def _component_logpdf(gm, x):
    cond = np.linalg.cond(gm.covs)
    if np.any(cond > MAX_CONDITION):
        raise np.linalg.LinAlgError(f"covariance condition number {cond.max():.3g} exceeds {MAX_CONDITION:g}")
    diff = x[:, None, :] - gm.means[None]  # (N, K, 2)
    prec = np.linalg.inv(gm.covs)
    maha = np.einsum("nki,kij,nkj->nk", diff, prec, diff)
    _, logdet = np.linalg.slogdet(gm.covs)
    return -_LOG_2PI - 0.5 * logdet[None] - 0.5 * maha


def logpdf(gm: GaussMix2, x):
    """Log density of ``gm`` at one point (2,) or many points (N, 2)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    with np.errstate(divide="ignore"):
        lw = np.log(gm.weights)
    out = _logsumexp(lw[None] + _component_logpdf(gm, x), axis=1)
    return float(out[0]) if single else out


def pdf(gm: GaussMix2, x):
    """Mixture density sum_k w_k N(x; mu_k, Sigma_k) in 1/m^2."""
    out = np.exp(logpdf(gm, x))
    return float(out) if np.ndim(out) == 0 else out


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def condense(gm: GaussMix2) -> Gaussian2:
    """Moment-matched single Gaussian.

    With a common mean across components this is just ``sum_k w_k Sigma_k``.
    """
    mu = gm.weights @ gm.means
    d = gm.means - mu
    cov = np.einsum("k,kij->ij", gm.weights, gm.covs + d[:, :, None] * d[:, None, :])
    return Gaussian2(mu, cov)


def _check_unit(d):
    d = np.asarray(d, dtype=float)
    if d.shape != (2,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit 2-vector")
    return d


def marginalize(gm: GaussMix2, d, center=None) -> GaussMix1:
    """Project ``gm`` onto unit direction ``d`` relative to ``center``.

    ``center`` defaults to the mixture mean.
    """
    d = _check_unit(d)
    center = gm.mean() if center is None else np.asarray(center, dtype=float)
    var = np.einsum("i,kij,j->k", d, gm.covs, d)
    if np.any(var <= 0):
        raise ValueError("projected variance is not positive")
    return GaussMix1(gm.weights, (gm.means - center) @ d, var)


def tail_mass(gm1: GaussMix1, beta):
    """Upper-tail probability Pr(X > beta)."""
    return float(gm1.weights @ ndtr((gm1.means - beta) / gm1.stds))


def tail_threshold(gm1: GaussMix1, alpha, xtol=1e-8):
    """Return beta whose upper-tail mass under ``gm1`` is (1 - alpha) / 2."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    target = 0.5 * (1.0 - alpha)
    sd = gm1.stds
    lo = float(np.min(gm1.means - 10 * sd))
    hi = float(np.max(gm1.means + 10 * sd))

    def f(b):
        return tail_mass(gm1, b) - target

    while f(lo) < 0 or f(hi) > 0:
        c, half = 0.5 * (lo + hi), hi - lo
        lo, hi = c - half, c + half
    return bisect(f, lo, hi, xtol=xtol)


def two_sided_percentile(gm1: GaussMix1, e):
    """Probability mass of ``gm1`` on the interval [-e, e]."""
    if e < 0:
        raise ValueError("half-width must be non-negative")
    sd = gm1.stds
    p = gm1.weights @ (ndtr((e - gm1.means) / sd) - ndtr((-e - gm1.means) / sd))
    return float(np.clip(p, 0.0, 1.0))


def rotate_to_inertial(gm: GaussMix2, heading, anchor=None) -> GaussMix2:
    """Rotate car-frame covariances (and mean offsets about ``anchor``) by ``heading``.

    ``anchor`` defaults to the mixture mean, so a mixture whose components share
    one mean keeps its means unchanged.
    """
    C = rotation(heading)
    anchor = gm.mean() if anchor is None else np.asarray(anchor, dtype=float)
    means = anchor + (gm.means - anchor) @ C.T
    covs = C @ gm.covs @ C.T
    return GaussMix2(gm.weights, means, covs)


def sample(gm: GaussMix2, rng, n):
    """Draw ``n`` points. ``rng`` is a seed or ``numpy.random.Generator``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    L = np.linalg.cholesky(gm.covs)
    k = rng.choice(gm.K, size=n, p=gm.weights)
    z = rng.standard_normal((n, 2))
    return gm.means[k] + np.einsum("nij,nj->ni", L[k], z)
