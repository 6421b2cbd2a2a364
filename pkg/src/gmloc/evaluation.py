"""Calibration statistics, credibility and histogram reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .gating import ZERO_INNOVATION
from .mixture import GaussMix2, condense, marginalize, tail_threshold, two_sided_percentile

__all__ = [
    "METHODS",
    "CRED_LEVELS",
    "CalibrationSeries",
    "CredibilityReport",
    "HistogramTable",
    "d2_stat",
    "chi2_2_quantile",
    "gm_marginalized_stat",
    "gm_condensed_stat",
    "calibration_series",
    "calibration_histogram",
    "credibility",
    "step_credibility",
    "fit_constant_sigma",
    "constant_measurement",
    "histogram_svg",
]

METHODS = ("constant", "baseline", "gm-condensed", "gm-marginalized")
CRED_LEVELS = (0.683, 0.954, 0.997)
PERCENTILE_MARKS = (65.0, 95.0, 99.0)
P_MAX = 1.0 - 1e-12


def chi2_2_quantile(p):
    """Inverse CDF of the chi-square distribution with two degrees of freedom."""
    return -2.0 * np.log1p(-np.asarray(p, dtype=float))


def d2_stat(err, R):
    """Normalized error squared ``err^T R^-1 err``."""
    R = np.asarray(R, dtype=float)
    err = np.asarray(err, dtype=float)
    if np.linalg.cond(R) > 1e12:
        raise np.linalg.LinAlgError("R is singular")
    return float(err @ np.linalg.solve(R, err))


def gm_marginalized_stat(meas: GaussMix2, r_gt):
    """Chi-square(2) equivalent of the two-sided percentile of ``r_gt`` along the error direction.

    The mixture is projected onto the direction of ``r_gt - r_hat`` (``r_hat``
    being the mixture mean) and the two-sided probability P of the error
    magnitude is mapped through the chi-square(2) inverse CDF.
    """
    r_hat = meas.mean()
    e = np.asarray(r_gt, dtype=float) - r_hat
    dist = float(np.linalg.norm(e))
    if dist < ZERO_INNOVATION:
        return 0.0
    P = two_sided_percentile(marginalize(meas, e / dist, center=r_hat), dist)
    return float(chi2_2_quantile(min(P, P_MAX)))


def gm_condensed_stat(meas: GaussMix2, r_gt):
    g = condense(meas)
    return d2_stat(np.asarray(r_gt, dtype=float) - g.mean, g.cov)


@dataclass
class CalibrationSeries:
    values: np.ndarray
    method: str
    condition: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("statistics must be finite and non-negative")

    def coverage(self, level):
        """Fraction of frames inside the chi-square(2) bound at ``level``."""
        return float(np.mean(self.values <= chi2_2_quantile(level)))


def calibration_series(method, measurements, truths, condition=""):
    """Per-frame statistic for one uncertainty model.

    ``measurements`` are mixtures in a common frame with ``truths``.
    ``gm-marginalized`` uses the direction-marginal percentile; every other
    method uses the normalized error squared against the condensed covariance.
    """
    if method == "gm-marginalized":
        vals = [gm_marginalized_stat(m, r) for m, r in zip(measurements, truths)]
    else:
        vals = [gm_condensed_stat(m, r) for m, r in zip(measurements, truths)]
    return CalibrationSeries(np.array(vals), method, condition)


@dataclass
class HistogramTable:
    edges: np.ndarray
    density: np.ndarray
    reference: np.ndarray
    percentiles: dict
    reference_percentiles: dict

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def integral(self):
        return float(np.sum(self.density * np.diff(self.edges)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "density", "chi2_2_density"])
        for lo, hi, d, r in zip(self.edges[:-1], self.edges[1:], self.density, self.reference):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(d)), repr(float(r))])
        for q in self.percentiles:
            w.writerow([f"p{q:g}", "", repr(float(self.percentiles[q])), repr(float(self.reference_percentiles[q]))])
        return buf.getvalue()


def calibration_histogram(series, bins=50, range=None, marks=PERCENTILE_MARKS) -> HistogramTable:
    """Density-normalized histogram of a statistic with the chi-square(2) reference.

    Counts are divided by the total number of values and the bin width, so
    the density integrates to the fraction of values inside ``range`` (1 for
    the default range, which spans all values).
    """
    vals = series.values if isinstance(series, CalibrationSeries) else np.asarray(series, dtype=float)
    if vals.size == 0:
        raise ValueError("empty series")
    if range is None and np.ndim(bins) == 0:
        hi = float(vals.max())
        range = (0.0, hi if hi > 0 else 1.0)
    counts, edges = np.histogram(vals, bins=bins, range=range)
    density = counts / (vals.size * np.diff(edges))
    centers = 0.5 * (edges[:-1] + edges[1:])
    ref = 0.5 * np.exp(-0.5 * centers)
    pct = {q: float(np.percentile(vals, q)) for q in marks}
    ref_pct = {q: float(chi2_2_quantile(q / 100.0)) for q in marks}
    return HistogramTable(edges, density, ref, pct, ref_pct)


@dataclass
class CredibilityReport:
    fractions: tuple
    d_err: float
    n_r: float
    frames: int

    def __post_init__(self):
        f = np.asarray(self.fractions)
        if np.any(f < 0) or np.any(f > 1) or np.any(np.diff(f) < 0):
            raise ValueError("credibility fractions must be nondecreasing in [0, 1]")

    def to_dict(self):
        return {
            "d_err": self.d_err,
            "cred68": 100.0 * self.fractions[0],
            "cred95": 100.0 * self.fractions[1],
            "cred997": 100.0 * self.fractions[2],
            "n_r": 100.0 * self.n_r,
            "frames": self.frames,
        }


def step_credibility(err, posterior, mode="spf", bounds="sigma", levels=CRED_LEVELS):
    """Whether one estimation error falls inside each credibility bound.

    ``mode="spf"``: ``posterior`` is a 2x2 position covariance. With
    ``bounds="sigma"`` the bounds are the 1-, 2- and 3-sigma ellipses
    (d^2 <= 1, 4, 9); with ``bounds="chi2"`` they are the chi-square(2)
    quantiles at ``levels``.

    ``mode="gsf"``: ``posterior`` is a planar position mixture. With
    ``bounds="sigma"`` the error magnitude is compared with the one-sided tail
    thresholds of the mixture projected onto the error direction around its
    mean; with ``bounds="chi2"`` the marginalized statistic is compared with
    the chi-square(2) quantiles.
    """
    err = np.asarray(err, dtype=float)
    if mode == "spf":
        d2 = d2_stat(err, posterior)
        thr = (1.0, 4.0, 9.0) if bounds == "sigma" else chi2_2_quantile(levels)
        return tuple(bool(d2 <= t) for t in thr)
    if mode != "gsf":
        raise ValueError(f"unknown mode {mode!r}")
    dist = float(np.linalg.norm(err))
    if dist < ZERO_INNOVATION:
        return (True,) * len(levels)
    if bounds == "chi2":
        stat = gm_marginalized_stat(posterior, posterior.mean() + err)
        return tuple(bool(stat <= t) for t in chi2_2_quantile(levels))
    m1 = marginalize(posterior, err / dist)
    return tuple(bool(dist <= tail_threshold(m1, a)) for a in levels)


def credibility(errors, inside, accepted=None) -> CredibilityReport:
    """Summarize a trace.

    ``errors`` (N, 2) position errors, ``inside`` (N, 3) per-step bound
    indicators, ``accepted`` optional gate decisions (None = no gating).
    """
    errors = np.asarray(errors, dtype=float).reshape(-1, 2)
    inside = np.asarray(inside, dtype=bool).reshape(len(errors), -1)
    if len(errors) == 0:
        raise ValueError("empty trace")
    frac = tuple(float(x) for x in inside.mean(axis=0))
    n_r = 0.0 if accepted is None else float(1.0 - np.mean(np.asarray(accepted, dtype=bool)))
    return CredibilityReport(frac, float(np.mean(np.linalg.norm(errors, axis=1))), n_r, len(errors))


def fit_constant_sigma(errors, grid=None):
    """Isotropic sigma minimizing the Gaussian NLL of ``errors`` over ``grid``."""
    e2 = np.sum(np.asarray(errors, dtype=float) ** 2, axis=1)
    if grid is None:
        grid = np.geomspace(0.1, 100.0, 601)
    grid = np.asarray(grid, dtype=float)
    nll = np.log(2 * np.pi) + 2 * np.log(grid)[:, None] + 0.5 * e2[None] / grid[:, None] ** 2
    return float(grid[np.argmin(nll.mean(axis=1))])


def constant_measurement(r_hat, sigma):
    return GaussMix2.single(r_hat, sigma**2 * np.eye(2))


def histogram_svg(table: HistogramTable, title="", width=480, height=300, pad=36):
    """Bars for the empirical density plus a polyline for the chi-square(2) reference."""
    x0, x1 = table.edges[0], table.edges[-1]
    ymax = max(float(table.density.max()), float(table.reference.max()), 1e-12) * 1.05
    sx = (width - 2 * pad) / (x1 - x0)
    sy = (height - 2 * pad) / ymax

    def X(x):
        return pad + (x - x0) * sx

    def Y(y):
        return height - pad - y * sy

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="{pad / 2:.1f}" text-anchor="middle" font-size="12">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for lo, hi, d in zip(table.edges[:-1], table.edges[1:], table.density):
        parts.append(
            f'<rect x="{X(lo):.2f}" y="{Y(d):.2f}" width="{max((hi - lo) * sx, 0.0):.2f}" '
            f'height="{d * sy:.2f}" fill="steelblue" fill-opacity="0.6"/>'
        )
    pts = " ".join(f"{X(c):.2f},{Y(r):.2f}" for c, r in zip(table.centers, table.reference))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="red" stroke-dasharray="4 3"/>')
    for q, v in table.percentiles.items():
        if x0 <= v <= x1:
            parts.append(f'<line x1="{X(v):.2f}" y1="{pad}" x2="{X(v):.2f}" y2="{height - pad}" stroke="gray"/>')
            parts.append(f'<text x="{X(v) + 2:.2f}" y="{pad + 10}" font-size="9">{q:g}%</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
