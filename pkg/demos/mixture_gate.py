"""Why a heavy-tailed measurement model changes the gate.

A 90/10 mixture of 1 m and 6 m errors is compared with the single Gaussian
that has the same covariance. The mixture gate widens along directions where
the tail component dominates the quantile, while the condensed chi-square gate
ignores the shape of the tail.

    python3 demos/mixture_gate.py
"""

import numpy as np

from gmloc.gating import chi2_threshold, gate_gaussian, gate_gm
from gmloc.mixture import GaussMix2, condense, marginalize, tail_threshold

meas = GaussMix2([0.9, 0.1], np.zeros((2, 2)), [np.eye(2), 36 * np.eye(2)])
g = condense(meas)
print(f"condensed std per axis: {np.sqrt(g.cov[0, 0]):.3f} m")

d = np.array([1.0, 0.0])
m1 = marginalize(meas, d)
for alpha in (0.683, 0.954, 0.99, 0.999):
    beta_mix = tail_threshold(m1, alpha)
    beta_gauss = np.sqrt(chi2_threshold(alpha) * g.cov[0, 0])
    print(f"alpha={alpha:<6} mixture 1D quantile {beta_mix:7.3f} m   condensed chi2 radius {beta_gauss:7.3f} m")

pred = GaussMix2.single([0.0, 0.0], 0.25 * np.eye(2))
print("\ninnovation  chi2(condensed)  gm-gate   (alpha=0.99)")
for r in (2.0, 5.0, 8.0, 12.0, 20.0):
    z = np.array([r, 0.0])
    shifted = GaussMix2(meas.weights, np.tile(z, (2, 1)), meas.covs)
    a = gate_gaussian(z, g.cov + pred.covs[0], 0.99).accepted
    b = gate_gm(z, pred, shifted, 0.99).accepted
    print(f"{r:8.1f} m  {'accept' if a else 'reject':>15s}  {'accept' if b else 'reject':>7s}")
