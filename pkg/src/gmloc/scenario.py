"""Synthetic driving scenarios with known measurement-error distributions.

A condition profile fixes a zero-mean car-frame error mixture, an outlier
rate and the statistics of the keypoint matches. For every record the
generator draws a match count ``n_kpm`` and a dynamic-class fraction, turns
them into an error scale

    s = clip(0.5 + 40 / n_kpm + 0.8 * frac_dynamic, 0.5, 5.0)

and draws the measurement error as ``s`` times a sample of the profile
mixture. With probability ``outlier_rate`` the error is replaced by an
outlier: a uniformly random direction at distance ``outlier_scale`` plus
isotropic normal jitter with standard deviation
``outlier_spread * outlier_scale``. The matches are synthesized so
that the scale and the condition can be read back from them:

* match scores sit in a narrow band centred on ``0.95 - 0.15 (s - 0.5)``;
* ``n_dynamic = round(frac_dynamic * n_kpm)`` matches carry classes from
  person..bicycle, the rest from road..sky;
* query keypoint rows fall in a profile-specific vertical band of the image.

Because the generating density is known, every record carries the oracle
negative log-likelihood of its own error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import i0e

from .filters import motion_model, wrap_angle
from .kse import DYNAMIC_CLASSES, FrameContext
from .mixture import GaussMix2, logpdf, rotation, sample

__all__ = [
    "MatchStats",
    "ConditionProfile",
    "Trajectory",
    "ScenarioRecord",
    "DEFAULT_PROFILES",
    "default_profiles",
    "error_scale",
    "integrate_segments",
    "gen_trajectory",
    "gen_record",
    "gen_records",
    "simulate",
    "oracle_nll",
    "matched_process_noise",
    "outlier_logpdf",
    "export_jsonl",
    "import_jsonl",
    "profiles_to_json",
    "profiles_from_json",
]

STATIC_CLASSES = tuple(range(0, 11))
IMAGE_W, IMAGE_H = 1920, 1208


@dataclass(frozen=True)
class MatchStats:
    nkpm_mean: float = 150.0
    nkpm_dispersion: float = 4.0
    nkpm_min: int = 8
    nkpm_max: int = 600
    dynamic_beta: tuple = (1.0, 9.0)
    y_band: tuple = (0.2, 0.8)
    ms_jitter: float = 0.02
    pixel_shift: float = 25.0

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class ConditionProfile:
    name: str
    error_mixture: GaussMix2
    outlier_rate: float = 0.0
    outlier_scale: float = 50.0
    match_stats: MatchStats = field(default_factory=MatchStats)
    outlier_spread: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must be in [0, 1)")
        if not self.outlier_scale > 0:
            raise ValueError("outlier_scale must be positive")
        if not self.outlier_spread > 0:
            raise ValueError("outlier_spread must be positive")

    def without_outliers(self):
        return replace(self, outlier_rate=0.0)

    def to_dict(self):
        return {
            "name": self.name,
            "error_mixture": self.error_mixture.to_dict(),
            "outlier_rate": self.outlier_rate,
            "outlier_scale": self.outlier_scale,
            "match_stats": self.match_stats.to_dict(),
            "outlier_spread": self.outlier_spread,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["name"],
            GaussMix2.from_dict(d["error_mixture"]),
            d.get("outlier_rate", 0.0),
            d.get("outlier_scale", 50.0),
            MatchStats.from_dict(d.get("match_stats", {})),
            d.get("outlier_spread", 0.1),
        )


def _isotropic(weights, sigmas):
    k = len(weights)
    return GaussMix2(weights, np.zeros((k, 2)), [s**2 * np.eye(2) for s in sigmas])


def default_profiles():
    return {
        "sunny": ConditionProfile(
            "sunny",
            _isotropic([1.0], [1.0]),
            0.0,
            50.0,
            MatchStats(nkpm_mean=180.0, dynamic_beta=(1.0, 9.0), y_band=(0.15, 0.55)),
        ),
        "night": ConditionProfile(
            "night",
            _isotropic([0.85, 0.15], [1.0, 6.0]),
            0.05,
            50.0,
            MatchStats(nkpm_mean=60.0, dynamic_beta=(2.0, 6.0), y_band=(0.55, 0.95)),
        ),
        "snowy": ConditionProfile(
            "snowy",
            _isotropic([0.9, 0.1], [1.2, 4.0]),
            0.03,
            50.0,
            MatchStats(nkpm_mean=100.0, dynamic_beta=(1.5, 8.0), y_band=(0.35, 0.75)),
        ),
    }


DEFAULT_PROFILES = default_profiles()


def profiles_to_json(profiles):
    return json.dumps({name: p.to_dict() for name, p in profiles.items()}, indent=2)


def profiles_from_json(text):
    return {name: ConditionProfile.from_dict(d) for name, d in json.loads(text).items()}


def error_scale(n_kpm, frac_dynamic):
    return float(np.clip(0.5 + 40.0 / n_kpm + 0.8 * frac_dynamic, 0.5, 5.0))


def ms_center(scale):
    return 0.95 - 0.15 * (scale - 0.5)


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    states: np.ndarray

    def __len__(self):
        return len(self.t)


def integrate_segments(state0, segments, dt):
    """Integrate ``[(duration, v, theta_dot), ...]`` with the filter motion model.

    Speed and yaw rate switch at the start of each segment.
    """
    s = np.array(state0, dtype=float)
    s[2] = wrap_angle(s[2])
    states = []
    for duration, v, om in segments:
        s[3], s[4] = v, om
        for _ in range(int(round(duration / dt))):
            states.append(s.copy())
            s = motion_model(s, dt)
    states.append(s.copy())
    states = np.array(states)
    return Trajectory(dt * np.arange(len(states)), states)


SPEED_RANGE = (3.0, 20.0)
YAW_RATE_RANGE = (-0.3, 0.3)
SEGMENT_SECONDS = (5.0, 20.0)


def matched_process_noise(base=(1e-4, 1e-4, 1e-5)):
    """Per-second diagonal process noise matched to the trajectory generator.

    Speed and yaw rate jump to fresh uniform draws at segment boundaries, so
    the variance of one jump (twice the uniform variance) spread over the mean
    segment length gives a per-second random-walk rate. ``base`` covers x, y
    and heading.
    """
    mean_seg = 0.5 * sum(SEGMENT_SECONDS)
    jump = lambda lo_hi: 2.0 * (lo_hi[1] - lo_hi[0]) ** 2 / 12.0
    return np.diag([*base, jump(SPEED_RANGE) / mean_seg, jump(YAW_RATE_RANGE) / mean_seg])


def gen_trajectory(seed, duration, dt):
    """Piecewise-constant speed / yaw-rate trajectory sampled every ``dt`` seconds."""
    if not duration >= dt > 0:
        raise ValueError("need duration >= dt > 0")
    rng = np.random.default_rng(seed)
    n = int(np.floor(duration / dt + 1e-9)) + 1
    states = np.empty((n, 5))
    s = np.array([0.0, 0.0, rng.uniform(-np.pi, np.pi), 0.0, 0.0])
    remaining = 0
    for i in range(n):
        if remaining <= 0:
            s[3] = rng.uniform(*SPEED_RANGE)
            s[4] = rng.uniform(*YAW_RATE_RANGE)
            remaining = max(1, int(round(rng.uniform(*SEGMENT_SECONDS) / dt)))
        states[i] = s
        s = motion_model(s, dt)
        remaining -= 1
    return Trajectory(dt * np.arange(n), states)


@dataclass
class ScenarioRecord:
    t: float
    state_gt: np.ndarray
    frame: FrameContext
    scale: float = 1.0
    outlier: bool = False
    oracle_nll: float = float("nan")

    def to_dict(self):
        d = self.frame.to_dict()
        d.update(
            t=float(self.t),
            state_gt=np.asarray(self.state_gt, dtype=float).tolist(),
            scale=float(self.scale),
            outlier=bool(self.outlier),
            oracle_nll=float(self.oracle_nll),
        )
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["t"],
            np.asarray(d["state_gt"], dtype=float),
            FrameContext.from_dict(d),
            d.get("scale", 1.0),
            d.get("outlier", False),
            d.get("oracle_nll", float("nan")),
        )


def outlier_logpdf(err, scale, spread):
    """Log density of a ring outlier: uniform direction at radius ``scale``
    plus isotropic normal jitter with standard deviation ``spread * scale``."""
    r = float(np.linalg.norm(err))
    sd2 = (spread * scale) ** 2
    # exp(-(r^2 + L^2) / 2 sd^2) I0(r L / sd^2) written with the scaled Bessel function
    return float(-np.log(2 * np.pi * sd2) - 0.5 * (r - scale) ** 2 / sd2 + np.log(i0e(r * scale / sd2)))


def oracle_nll(err_car, profile: ConditionProfile, scale):
    """-log density of a car-frame error under the generating distribution."""
    err = np.asarray(err_car, dtype=float)
    lp_core = logpdf(profile.error_mixture, err / scale) - 2.0 * np.log(scale)
    if profile.outlier_rate == 0:
        return float(-lp_core)
    lp_out = outlier_logpdf(err, profile.outlier_scale, profile.outlier_spread)
    return float(-np.logaddexp(np.log1p(-profile.outlier_rate) + lp_core, np.log(profile.outlier_rate) + lp_out))


def gen_record(state, profile: ConditionProfile, rng, t=0.0) -> ScenarioRecord:
    rng = np.random.default_rng(rng)
    ms_ = profile.match_stats
    r = ms_.nkpm_dispersion
    mean_extra = max(ms_.nkpm_mean - ms_.nkpm_min, 1e-9)
    n = ms_.nkpm_min + int(rng.negative_binomial(r, r / (r + mean_extra)))
    n = min(n, ms_.nkpm_max)
    frac = rng.beta(*ms_.dynamic_beta)
    n_dyn = int(round(frac * n))
    s = error_scale(n, n_dyn / n)

    heading = float(state[2])
    outlier = bool(rng.random() < profile.outlier_rate)
    if outlier:
        phi = rng.uniform(-np.pi, np.pi)
        L = profile.outlier_scale
        err_car = L * np.array([np.cos(phi), np.sin(phi)]) + profile.outlier_spread * L * rng.standard_normal(2)
    else:
        err_car = s * sample(profile.error_mixture, rng, 1)[0]
    # r_hat = r_gt + error, so the car-frame r_gt - r_hat is -err_car
    r_gt = np.array(state[:2], dtype=float)
    r_hat = r_gt + rotation(heading) @ err_car

    W, H = IMAGE_W, IMAGE_H
    xq = rng.uniform(0, W - 1, n)
    yq = rng.uniform(*ms_.y_band, n) * (H - 1)
    xr = np.clip(xq + rng.normal(0, ms_.pixel_shift, n), 0, W - 1)
    yr = np.clip(yq + rng.normal(0, ms_.pixel_shift, n), 0, H - 1)
    ms = np.clip(ms_center(s) + rng.uniform(-ms_.ms_jitter, ms_.ms_jitter, n), 0.0, 1.0)
    cls = np.concatenate([
        rng.choice(DYNAMIC_CLASSES, n_dyn),
        rng.choice(STATIC_CLASSES, n - n_dyn),
    ])
    cls = cls[rng.permutation(n)]
    matches = np.column_stack([xq, yq, xr, yr, ms, cls, cls])
    frame = FrameContext(matches, r_hat, r_gt, heading=heading, W=W, H=H, condition=profile.name)
    nll = oracle_nll(frame.error_car(), profile, s)
    return ScenarioRecord(float(t), np.array(state, dtype=float), frame, s, outlier, nll)


def gen_records(traj: Trajectory, profile: ConditionProfile, seed):
    """One record per trajectory sample, each from its own counter-based stream."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(len(traj))
    return [
        gen_record(s, profile, np.random.default_rng(ss), t)
        for t, s, ss in zip(traj.t, traj.states, seeds)
    ]


def simulate(seed, profile: ConditionProfile, duration=300.0, dt=0.5):
    """Trajectory plus records: a pure function of its arguments."""
    ss_traj, ss_rec = np.random.SeedSequence(seed).spawn(2)
    traj = gen_trajectory(ss_traj, duration, dt)
    return gen_records(traj, profile, ss_rec)


def export_jsonl(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict()))
            f.write("\n")


def import_jsonl(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(ScenarioRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records
