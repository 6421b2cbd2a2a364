"""Unscented (sigma-point) and Gaussian-sum filters for a planar vehicle.

State layout is ``[x, y, theta, v, theta_dot]``: inertial position (m),
heading (rad, wrapped to (-pi, pi]), speed (m/s) and yaw rate (rad/s). The
motion model holds speed and yaw rate constant over a step; the measurement
is the position alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixture import GaussMix2, condense, rotate_to_inertial

__all__ = [
    "NX",
    "wrap_angle",
    "StateBelief",
    "GsfBelief",
    "MotionParams",
    "UkfParams",
    "default_process_noise",
    "motion_model",
    "observe",
    "sigma_weights",
    "ukf_predict",
    "predicted_measurement",
    "ukf_update",
    "spf_update_gm",
    "gsf_predict",
    "gsf_update",
    "gsf_condense",
    "moment_match",
    "initial_belief",
]

NX = 5
THETA = 2
EIG_FLOOR = 1e-12


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def _sym(P):
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class StateBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float)
        P = np.array(self.cov, dtype=float)
        if m.shape != (NX,) or P.shape != (NX, NX):
            raise ValueError("belief must be a 5-vector with a 5x5 covariance")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(P))):
            raise ValueError("belief has non-finite entries")
        m[THETA] = wrap_angle(m[THETA])
        P = _sym(P)
        if np.linalg.eigvalsh(P).min() < -EIG_FLOOR:
            raise ValueError("belief covariance is not positive semidefinite")
        m.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", P)

    @property
    def position(self):
        return self.mean[:2]

    @property
    def position_cov(self):
        return self.cov[:2, :2]


@dataclass(frozen=True)
class GsfBelief:
    weights: np.ndarray
    hypotheses: tuple

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        hyps = tuple(self.hypotheses)
        if len(w) != len(hyps) or len(w) == 0:
            raise ValueError("need one weight per hypothesis and at least one hypothesis")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("hypothesis weights must be non-negative and sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "hypotheses", hyps)

    @classmethod
    def from_belief(cls, b):
        return cls([1.0], (b,))

    def __len__(self):
        return len(self.hypotheses)


def default_process_noise(dt):
    return np.diag([1e-4, 1e-4, 1e-5, 0.25, 0.01]) * dt


@dataclass(frozen=True)
class MotionParams:
    dt: float
    Q: np.ndarray = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        Q = default_process_noise(self.dt) if self.Q is None else np.asarray(self.Q, dtype=float)
        if Q.shape != (NX, NX) or not np.allclose(Q, Q.T):
            raise ValueError("Q must be a symmetric 5x5 matrix")
        if np.linalg.eigvalsh(Q).min() < -EIG_FLOOR:
            raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "Q", Q)


@dataclass(frozen=True)
class UkfParams:
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        lam = self.alpha**2 * (NX + self.kappa) - NX
        if not np.isfinite(lam / (NX + lam)):
            raise ValueError("sigma-point weights are not finite")


def motion_model(s, dt):
    """Euler step of the constant speed / yaw-rate model. Works on (5,) or (N, 5)."""
    s = np.asarray(s, dtype=float)
    x, y, th, v, om = np.moveaxis(s, -1, 0)
    out = np.stack(
        [
            x + v * np.cos(th) * dt,
            y + v * np.sin(th) * dt,
            wrap_angle(th + om * dt),
            v,
            om,
        ],
        axis=-1,
    )
    return out


def observe(s):
    return np.asarray(s, dtype=float)[..., :2]


def sigma_weights(up: UkfParams, n=NX):
    lam = up.alpha**2 * (n + up.kappa) - n
    c = n + lam
    wm = np.full(2 * n + 1, 0.5 / c)
    wc = wm.copy()
    wm[0] = lam / c
    wc[0] = lam / c + (1.0 - up.alpha**2 + up.beta)
    return wm, wc, c


def _sqrt_cov(P):
    """Cholesky factor, or after one failure a symmetric root with eigenvalues floored at 0."""
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(_sym(P))
    if not np.all(np.isfinite(vals)) or vals.min() < -EIG_FLOOR * max(1.0, vals.max()):
        raise np.linalg.LinAlgError("covariance is not positive semidefinite")
    return vecs * np.sqrt(np.maximum(vals, 0.0))


def _sigma_points(b: StateBelief, up: UkfParams):
    wm, wc, c = sigma_weights(up)
    L = _sqrt_cov(c * b.cov)
    X = np.empty((2 * NX + 1, NX))
    X[0] = b.mean
    X[1 : NX + 1] = b.mean + L.T
    X[NX + 1 :] = b.mean - L.T
    return X, wm, wc


def _circular_mean(X, w):
    m = w @ X
    m[THETA] = np.arctan2(w @ np.sin(X[:, THETA]), w @ np.cos(X[:, THETA]))
    return m


def _state_residual(X, m):
    d = X - m
    d[..., THETA] = wrap_angle(d[..., THETA])
    return d


def _sigma_mean(Y, wm):
    # The centre weight is strongly negative for small alpha, so a sum of unit
    # vectors can cancel and flip; average wrapped offsets from the centre instead.
    m = wm @ Y
    m[THETA] = wrap_angle(Y[0, THETA] + wm @ wrap_angle(Y[:, THETA] - Y[0, THETA]))
    return m


def _sigma_moments(Y, wm, wc):
    m = _sigma_mean(Y, wm)
    d = _state_residual(Y, m)
    P = _sym((d * wc[:, None]).T @ d)
    if np.linalg.eigvalsh(P).min() < 0:
        # Modified form: spread about the propagated centre point. PSD by
        # construction and equal to the standard form for linear maps.
        d0 = _state_residual(Y[1:], Y[0])
        delta = _state_residual(Y[0], m)
        P = _sym((d0 * wm[1:, None]).T @ d0 + (wc[0] - wm[0]) * np.outer(delta, delta))
    return m, P


def ukf_predict(b: StateBelief, mp: MotionParams, up: UkfParams = UkfParams()) -> StateBelief:
    X, wm, wc = _sigma_points(b, up)
    m, P = _sigma_moments(motion_model(X, mp.dt), wm, wc)
    return StateBelief(m, _sym(P + mp.Q))


def predicted_measurement(b: StateBelief, up: UkfParams = UkfParams()):
    """Unscented predicted measurement mean and covariance (no sensor noise)."""
    X, wm, wc = _sigma_points(b, up)
    Z = observe(X)
    zhat = wm @ Z
    dz = Z - zhat
    return zhat, _sym((dz * wc[:, None]).T @ dz)


def ukf_update(b: StateBelief, z, R, up: UkfParams = UkfParams()):
    """Unscented update against a position measurement.

    Returns ``(posterior, innovation, S)``.
    """
    z = np.asarray(z, dtype=float)
    R = np.asarray(R, dtype=float)
    X, wm, wc = _sigma_points(b, up)
    Z = observe(X)
    zhat = wm @ Z
    dz = Z - zhat
    dx = _state_residual(X, b.mean)
    S = _sym((dz * wc[:, None]).T @ dz + R)
    Pxz = (dx * wc[:, None]).T @ dz
    if np.linalg.cond(S) > 1e12:
        raise np.linalg.LinAlgError("innovation covariance is singular")
    K = np.linalg.solve(S, Pxz.T).T
    innov = z - zhat
    m = b.mean + K @ innov
    P = _sym(b.cov - K @ S @ K.T)
    return StateBelief(m, P), innov, S


def spf_update_gm(b: StateBelief, meas: GaussMix2, heading, up: UkfParams = UkfParams()):
    """Condense a car-frame measurement mixture and apply one unscented update."""
    g = condense(rotate_to_inertial(meas, heading))
    post, innov, S = ukf_update(b, g.mean, g.cov, up)
    return post, {"z": g.mean, "R": g.cov, "innovation": innov, "S": S}


def gsf_predict(gb: GsfBelief, mp: MotionParams, up: UkfParams = UkfParams()) -> GsfBelief:
    return GsfBelief(gb.weights, tuple(ukf_predict(h, mp, up) for h in gb.hypotheses))


def moment_match(weights, beliefs) -> StateBelief:
    """Weighted moment match of state beliefs; heading averaged on the circle."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    M = np.array([b.mean for b in beliefs])
    m = _circular_mean(M, w)
    d = _state_residual(M, m)
    P = sum(wi * (b.cov + np.outer(di, di)) for wi, b, di in zip(w, beliefs, d))
    return StateBelief(m, _sym(P))


def gsf_condense(gb: GsfBelief) -> StateBelief:
    if len(gb) == 1:
        return gb.hypotheses[0]
    return moment_match(gb.weights, gb.hypotheses)


def _gauss_logpdf(x, S):
    _, logdet = np.linalg.slogdet(S)
    return -np.log(2 * np.pi) - 0.5 * logdet - 0.5 * x @ np.linalg.solve(S, x)


def gsf_update(
    gb: GsfBelief,
    meas: GaussMix2,
    heading=None,
    M_max=6,
    w_floor=1e-4,
    up: UkfParams = UkfParams(),
):
    """Bank of unscented updates, one per (hypothesis, measurement component).

    ``heading`` overrides the per-hypothesis predicted heading used to rotate
    the car-frame measurement covariances. Candidates below ``w_floor`` are
    pruned, then the two lowest-weight hypotheses are merged until at most
    ``M_max`` remain.
    """
    if M_max < 1:
        raise ValueError("M_max must be >= 1")
    cands, logw = [], []
    for wi, h in zip(gb.weights, gb.hypotheses):
        th = h.mean[THETA] if heading is None else heading
        rm = rotate_to_inertial(meas, th)
        for wk, zk, Rk in zip(rm.weights, rm.means, rm.covs):
            post, innov, S = ukf_update(h, zk, Rk, up)
            cands.append(post)
            with np.errstate(divide="ignore"):
                logw.append(np.log(wi) + np.log(wk) + _gauss_logpdf(innov, S))
    logw = np.array(logw)
    fallback = not np.any(np.isfinite(logw))
    if fallback:
        with np.errstate(divide="ignore"):
            logw = np.log(np.outer(gb.weights, meas.weights).ravel())
    w = np.exp(logw - logw.max())
    w /= w.sum()

    keep = w >= w_floor
    keep[np.argmax(w)] = True
    n_pruned = int(np.sum(~keep))
    w = w[keep]
    cands = [c for c, k in zip(cands, keep) if k]
    w /= w.sum()

    n_merged = 0
    while len(cands) > M_max:
        i, j = np.argsort(w, kind="stable")[:2]
        merged = moment_match([w[i], w[j]], [cands[i], cands[j]])
        wm = w[i] + w[j]
        lo, hi = sorted((i, j))
        del cands[hi]
        cands[lo] = merged
        w = np.delete(w, hi)
        w[lo] = wm
        n_merged += 1
    w /= w.sum()
    diag = {"fallback": fallback, "n_pruned": n_pruned, "n_merged": n_merged}
    return GsfBelief(w, tuple(cands)), diag


def initial_belief(z0, z1, dt, cov_diag=(25.0, 25.0, 1.0, 25.0, 0.25)) -> StateBelief:
    """Belief from two consecutive position fixes ``dt`` seconds apart."""
    z0 = np.asarray(z0, dtype=float)
    disp = np.asarray(z1, dtype=float) - z0
    th = np.arctan2(disp[1], disp[0])
    v = np.linalg.norm(disp) / dt
    return StateBelief([z0[0], z0[1], th, v, 0.0], np.diag(cov_diag))
