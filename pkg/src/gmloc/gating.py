"""Measurement validation gates.

``gate_gaussian`` is the usual normalized-innovation-squared test against a
chi-square threshold with two degrees of freedom. ``gate_gm`` handles
Gaussian-mixture measurement and prediction models: both are projected onto
the innovation direction, each yields a one-sided tail threshold, and the
innovation magnitude is compared with their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixture import GaussMix2, marginalize, tail_threshold

__all__ = ["GateDecision", "nis", "chi2_threshold", "gate_gaussian", "gate_gm"]

ZERO_INNOVATION = 1e-12


@dataclass(frozen=True)
class GateDecision:
    accepted: bool
    statistic: float
    threshold: float
    alpha: float


def nis(innovation, S):
    innovation = np.asarray(innovation, dtype=float)
    S = np.asarray(S, dtype=float)
    if np.linalg.cond(S) > 1e12:
        raise np.linalg.LinAlgError("innovation covariance is singular")
    return float(innovation @ np.linalg.solve(S, innovation))


def chi2_threshold(alpha, nu=2):
    """Inverse chi-square CDF at ``alpha``; only two degrees of freedom."""
    if nu != 2:
        raise NotImplementedError("only nu=2 is supported")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(-2.0 * np.log1p(-alpha))


def gate_gaussian(innovation, S, alpha) -> GateDecision:
    d2 = nis(innovation, S)
    thr = chi2_threshold(alpha)
    return GateDecision(d2 <= thr, d2, thr, alpha)


def gate_gm(z, pred_meas: GaussMix2, meas: GaussMix2, alpha) -> GateDecision:
    """Gate ``z`` against a predicted-measurement mixture and a measurement mixture.

    ``pred_meas`` carries the predicted measurement mean(s) with covariances
    excluding sensor noise; ``meas`` is the measurement mixture in the
    inertial frame. Statistic and threshold are in meters.
    """
    z = np.asarray(z, dtype=float)
    h = pred_meas.mean()
    innov = z - h
    dist = float(np.linalg.norm(innov))
    if dist < ZERO_INNOVATION:
        return GateDecision(True, 0.0, 0.0, alpha)
    d = innov / dist
    beta_m = tail_threshold(marginalize(meas, d, center=meas.mean()), alpha)
    beta_p = tail_threshold(marginalize(pred_meas, d, center=h), alpha)
    thr = beta_m + beta_p
    return GateDecision(dist <= thr, dist, thr, alpha)
