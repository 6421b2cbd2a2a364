"""Keypoint-semantic error network.

A small permutation-invariant set network maps the keypoint matches of a
query/reference image pair to a K-component planar Gaussian mixture over the
localization error ``r_gt - r_hat``, expressed in the car frame (x lateral,
y forward).

Each match row is ``(xq, yq, xr, yr, ms, se[cq], se[cr])`` with pixel
coordinates normalized by ``(W - 1, H - 1)`` and ``se`` a learned table of 19
scalars, one per semantic class. Rows are sorted by match score, cropped or
zero-padded to ``Len`` rows, passed through a shared row MLP, max-pooled over
all ``Len`` rows (padding included) and fed to a head MLP emitting
``4 K`` raw values: log sigma_x, log sigma_y, correlation and mixture logits.

Forward pass, loss and its exact gradient are hand-written numpy; training
uses Adam.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .mixture import GaussMix2, rotation

__all__ = [
    "N_CLASSES",
    "CLASS_NAMES",
    "DYNAMIC_CLASSES",
    "KeypointMatch",
    "FrameContext",
    "DkpmMatrix",
    "GmmHeadOutput",
    "KseParams",
    "TrainConfig",
    "TrainResult",
    "BaselineModel",
    "build_dkpm",
    "init_params",
    "forward",
    "loss",
    "grad",
    "train",
    "predict_measurement",
    "predict_batch",
    "component_covariances",
    "mixture_nll",
    "baseline_fit",
    "baseline_predict",
    "save_params",
    "load_params",
]

log = logging.getLogger(__name__)

# Cityscapes 19-class order
CLASS_NAMES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
N_CLASSES = len(CLASS_NAMES)
DYNAMIC_CLASSES = tuple(range(11, 19))

LOG_SIGMA_MIN = float(np.log(1e-3))
LOG_SIGMA_MAX = float(np.log(1e4))
RHO_SCALE = 0.99
_LOG_2PI = float(np.log(2 * np.pi))
WEIGHT_NAMES = ("W1", "W2", "W3", "W4")
PARAM_NAMES = ("se", "W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")
FORMAT_VERSION = 1


class KeypointMatch(NamedTuple):
    xq: float
    yq: float
    xr: float
    yr: float
    ms: float
    cq: int
    cr: int


@dataclass
class FrameContext:
    """Keypoint matches of one query/reference pair plus its location fix.

    ``matches`` is an (n, 7) array with columns ``xq, yq, xr, yr, ms, cq, cr``.
    ``heading`` is the query heading used to express errors in the car frame.
    """

    matches: np.ndarray
    r_hat: np.ndarray
    r_gt: Optional[np.ndarray] = None
    heading: float = 0.0
    W: int = 1920
    H: int = 1208
    condition: str = ""

    def __post_init__(self):
        m = np.asarray(self.matches, dtype=float)
        if m.size == 0:
            m = m.reshape(0, 7)
        if m.ndim != 2 or m.shape[1] != 7:
            raise ValueError("matches must be an (n, 7) array")
        if self.W <= 0 or self.H <= 0:
            raise ValueError("image dimensions must be positive")
        if len(m):
            if np.any(m[:, [0, 2]] < 0) or np.any(m[:, [0, 2]] > self.W - 1):
                raise ValueError("x pixel coordinate outside [0, W-1]")
            if np.any(m[:, [1, 3]] < 0) or np.any(m[:, [1, 3]] > self.H - 1):
                raise ValueError("y pixel coordinate outside [0, H-1]")
            if np.any(m[:, 4] < 0) or np.any(m[:, 4] > 1):
                raise ValueError("match score outside [0, 1]")
        self.matches = m
        self.r_hat = np.asarray(self.r_hat, dtype=float)
        if self.r_gt is not None:
            self.r_gt = np.asarray(self.r_gt, dtype=float)

    @classmethod
    def from_matches(cls, matches, **kw):
        rows = [tuple(m) for m in matches]
        return cls(np.array(rows, dtype=float).reshape(-1, 7), **kw)

    @property
    def n_kpm(self):
        return len(self.matches)

    def iter_matches(self):
        for row in self.matches:
            yield KeypointMatch(*row[:5], int(row[5]), int(row[6]))

    def error_car(self):
        """Car-frame error ``r_gt - r_hat``."""
        if self.r_gt is None:
            raise ValueError("frame has no ground truth")
        return rotation(self.heading).T @ (self.r_gt - self.r_hat)

    def to_dict(self):
        d = {
            "r_hat": self.r_hat.tolist(),
            "r_gt": None if self.r_gt is None else self.r_gt.tolist(),
            "heading": float(self.heading),
            "W": int(self.W),
            "H": int(self.H),
            "condition": self.condition,
            "matches": [
                {"xq": m.xq, "yq": m.yq, "xr": m.xr, "yr": m.yr, "ms": m.ms, "cq": m.cq, "cr": m.cr}
                for m in self.iter_matches()
            ],
        }
        return d

    @classmethod
    def from_dict(cls, d):
        keys = ("xq", "yq", "xr", "yr", "ms", "cq", "cr")
        matches = np.array([[m[k] for k in keys] for m in d["matches"]], dtype=float).reshape(-1, 7)
        return cls(
            matches,
            d["r_hat"],
            d.get("r_gt"),
            heading=d.get("heading", 0.0),
            W=d.get("W", 1920),
            H=d.get("H", 1208),
            condition=d.get("condition", ""),
        )


@dataclass(frozen=True)
class DkpmMatrix:
    """Fixed-size network input.

    ``classes`` keeps the (query, reference) class id behind each row so the
    semantic table can receive gradients; padding rows carry -1.
    """

    rows: np.ndarray
    valid_count: int
    classes: np.ndarray


@dataclass(frozen=True)
class GmmHeadOutput:
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    rho: np.ndarray
    weights: np.ndarray

    @property
    def K(self):
        return len(self.weights)


def _check_table(table):
    table = np.asarray(table, dtype=float)
    if table.shape != (N_CLASSES,) or not np.all(np.isfinite(table)):
        raise ValueError(f"semantic table must hold {N_CLASSES} finite values")
    return table


def _encode(fc: FrameContext, Len):
    """Table-independent part of the input: (Len, 5) features and (Len, 2) classes."""
    m = fc.matches
    cls = m[:, 5:7]
    if len(m) and (np.any(cls < 0) or np.any(cls > N_CLASSES - 1) or np.any(cls != np.round(cls))):
        raise ValueError("semantic class id outside 0..18")
    order = np.argsort(-m[:, 4], kind="stable")[:Len]
    n = len(order)
    feat = np.zeros((Len, 5))
    classes = np.full((Len, 2), -1, dtype=np.int64)
    sel = m[order]
    feat[:n, 0] = sel[:, 0] / (fc.W - 1)
    feat[:n, 1] = sel[:, 1] / (fc.H - 1)
    feat[:n, 2] = sel[:, 2] / (fc.W - 1)
    feat[:n, 3] = sel[:, 3] / (fc.H - 1)
    feat[:n, 4] = sel[:, 4]
    classes[:n] = sel[:, 5:7].astype(np.int64)
    return feat, classes, n


def _assemble(feat, classes, se):
    sem = np.where(classes >= 0, se[np.maximum(classes, 0)], 0.0)
    return np.concatenate([feat, sem], axis=-1)


def build_dkpm(fc: FrameContext, table, Len=256) -> DkpmMatrix:
    table = _check_table(table)
    feat, classes, n = _encode(fc, Len)
    return DkpmMatrix(_assemble(feat, classes, table), n, classes)


@dataclass
class KseParams:
    se: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray
    K: int
    Len: int = 256

    @property
    def hidden(self):
        return (self.W1.shape[1], self.W2.shape[1], self.W3.shape[1])

    def tensors(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, tensors):
        return KseParams(**{**self.tensors(), **tensors}, K=self.K, Len=self.Len)

    def copy(self):
        return self.replace({k: v.copy() for k, v in self.tensors().items()})

    def weight_norm2(self):
        return float(sum(np.sum(getattr(self, n) ** 2) for n in WEIGHT_NAMES))

    def flat(self):
        return np.concatenate([v.ravel() for v in self.tensors().values()])

    def from_flat(self, vec):
        out, i = {}, 0
        for name, v in self.tensors().items():
            out[name] = vec[i : i + v.size].reshape(v.shape).copy()
            i += v.size
        return self.replace(out)


def init_params(K=3, Len=256, hidden=(64, 128, 64), seed=0) -> KseParams:
    """He-normal weights, zero biases, semantic table uniform in (-0.1, 0.1)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    h1, h2, h3 = hidden

    def he(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)

    se = rng.uniform(-0.1, 0.1, N_CLASSES)
    W1, W2, W3 = he(7, h1), he(h1, h2), he(h2, h3)
    W4 = rng.standard_normal((h3, 4 * K)) * (0.1 / np.sqrt(h3))
    b4 = np.zeros(4 * K)
    return KseParams(se, W1, np.zeros(h1), W2, np.zeros(h2), W3, np.zeros(h3), W4, b4, K, Len)


def _head(raw, K):
    ax, ay, ar, logits = raw[..., :K], raw[..., K : 2 * K], raw[..., 2 * K : 3 * K], raw[..., 3 * K :]
    a = np.clip(ax, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    b = np.clip(ay, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    t = np.tanh(ar)
    lw = logits - logits.max(axis=-1, keepdims=True)
    lw = lw - np.log(np.exp(lw).sum(axis=-1, keepdims=True))
    return a, b, t, lw


def _forward_batch(p: KseParams, X):
    Z1 = X @ p.W1 + p.b1
    H1 = np.maximum(Z1, 0.0)
    Z2 = H1 @ p.W2 + p.b2
    H2 = np.maximum(Z2, 0.0)
    idx = H2.argmax(axis=1)
    g = np.take_along_axis(H2, idx[:, None, :], axis=1)[:, 0]
    Z3 = g @ p.W3 + p.b3
    H3 = np.maximum(Z3, 0.0)
    raw = H3 @ p.W4 + p.b4
    cache = (X, Z1, H1, Z2, idx, g, Z3, H3)
    return raw, cache


def _nll_terms(raw, err, K):
    a, b, t, lw = _head(raw, K)
    rho = RHO_SCALE * t
    c = 1.0 - rho**2
    u = err[:, :1] * np.exp(-a)
    v = err[:, 1:] * np.exp(-b)
    q = u * u - 2 * rho * u * v + v * v
    logN = -_LOG_2PI - a - b - 0.5 * np.log(c) - 0.5 * q / c
    s = lw + logN
    smax = s.max(axis=1, keepdims=True)
    lse = smax[:, 0] + np.log(np.exp(s - smax).sum(axis=1))
    return -lse, (a, b, t, lw, rho, c, u, v, q, s, lse)


def _backward_batch(p: KseParams, raw, cache, err, classes, scale):
    """Gradients of ``scale * sum(nll)`` with respect to every parameter."""
    K = p.K
    _, (a, b, t, lw, rho, c, u, v, q, s, lse) = _nll_terms(raw, err, K)
    gam = np.exp(s - lse[:, None])
    uv = u * v
    d_a = -gam * (-1.0 + (u * u - rho * uv) / c)
    d_b = -gam * (-1.0 + (v * v - rho * uv) / c)
    d_rho = -gam * (rho / c + uv / c - q * rho / c**2)
    ax, ay = raw[:, :K], raw[:, K : 2 * K]
    d_a = d_a * ((ax >= LOG_SIGMA_MIN) & (ax <= LOG_SIGMA_MAX))
    d_b = d_b * ((ay >= LOG_SIGMA_MIN) & (ay <= LOG_SIGMA_MAX))
    d_r = d_rho * RHO_SCALE * (1.0 - t * t)
    d_logit = np.exp(lw) - gam
    draw = scale * np.concatenate([d_a, d_b, d_r, d_logit], axis=1)

    X, Z1, H1, Z2, idx, g, Z3, H3 = cache
    B, L, _ = X.shape
    gr = {}
    gr["W4"] = H3.T @ draw
    gr["b4"] = draw.sum(0)
    dZ3 = (draw @ p.W4.T) * (Z3 > 0)
    gr["W3"] = g.T @ dZ3
    gr["b3"] = dZ3.sum(0)
    dg = dZ3 @ p.W3.T
    C2 = dg.shape[1]
    dZ2 = np.zeros_like(Z2)
    bi = np.repeat(np.arange(B), C2)
    ci = np.tile(np.arange(C2), B)
    dZ2[bi, idx.ravel(), ci] = (dg * (g > 0)).ravel()
    dZ2f = dZ2.reshape(B * L, C2)
    gr["W2"] = H1.reshape(B * L, -1).T @ dZ2f
    gr["b2"] = dZ2f.sum(0)
    dZ1 = (dZ2f @ p.W2.T) * (Z1.reshape(B * L, -1) > 0)
    gr["W1"] = X.reshape(B * L, -1).T @ dZ1
    gr["b1"] = dZ1.sum(0)
    dX = dZ1 @ p.W1.T
    cls = classes.reshape(B * L, 2)
    dse = np.zeros(N_CLASSES)
    for col in (0, 1):
        mask = cls[:, col] >= 0
        dse += np.bincount(cls[mask, col], weights=dX[mask, 5 + col], minlength=N_CLASSES)
    gr["se"] = dse
    return gr


def forward(p: KseParams, D: DkpmMatrix) -> GmmHeadOutput:
    if D.rows.shape != (p.Len, 7):
        raise ValueError(f"input must be {p.Len} x 7, got {D.rows.shape}")
    raw, _ = _forward_batch(p, D.rows[None])
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("non-finite network activations")
    a, b, t, lw = _head(raw[0], p.K)
    return GmmHeadOutput(np.exp(a), np.exp(b), RHO_SCALE * t, np.exp(lw))


def component_covariances(out: GmmHeadOutput):
    sx, sy, r = out.sigma_x, out.sigma_y, out.rho
    cov = np.empty((out.K, 2, 2))
    cov[:, 0, 0] = sx**2
    cov[:, 1, 1] = sy**2
    cov[:, 0, 1] = cov[:, 1, 0] = r * sx * sy
    return cov


def mixture_nll(p: KseParams, D: DkpmMatrix, err):
    """Negative log-likelihood of a car-frame error, without regularization."""
    raw, _ = _forward_batch(p, D.rows[None])
    nll, _ = _nll_terms(raw, np.asarray(err, dtype=float).reshape(1, 2), p.K)
    return float(nll[0])


def loss(p: KseParams, D: DkpmMatrix, err, lam=5e-4):
    """NLL of ``err`` plus ``lam`` times the squared norm of the network weights.

    Biases and the semantic table are not regularized.
    """
    return mixture_nll(p, D, err) + lam * p.weight_norm2()


def grad(p: KseParams, D: DkpmMatrix, err, lam=5e-4):
    """Exact gradient of :func:`loss` as a dict keyed like ``p.tensors()``.

    Max-pool ties route the gradient to the first maximal row.
    """
    raw, cache = _forward_batch(p, D.rows[None])
    gr = _backward_batch(p, raw, cache, np.asarray(err, dtype=float).reshape(1, 2), D.classes[None], 1.0)
    for n in WEIGHT_NAMES:
        gr[n] = gr[n] + 2.0 * lam * getattr(p, n)
    return {n: gr[n] for n in PARAM_NAMES}


def predict_measurement(p: KseParams, fc: FrameContext) -> GaussMix2:
    """Car-frame measurement mixture centred on ``fc.r_hat``."""
    out = forward(p, build_dkpm(fc, p.se, p.Len))
    cov = component_covariances(out)
    return GaussMix2(out.weights, np.tile(fc.r_hat, (p.K, 1)), cov)


def predict_batch(p: KseParams, frames, chunk=64):
    """:func:`predict_measurement` for many frames at once."""
    out = []
    for i in range(0, len(frames), chunk):
        part = frames[i : i + chunk]
        enc = [_encode(fc, p.Len) for fc in part]
        X = _assemble(np.stack([e[0] for e in enc]), np.stack([e[1] for e in enc]), p.se)
        raw, _ = _forward_batch(p, X)
        if not np.all(np.isfinite(raw)):
            raise FloatingPointError("non-finite network activations")
        a, b, t, lw = _head(raw, p.K)
        for j, fc in enumerate(part):
            head = GmmHeadOutput(np.exp(a[j]), np.exp(b[j]), RHO_SCALE * t[j], np.exp(lw[j]))
            out.append(GaussMix2(head.weights, np.tile(fc.r_hat, (p.K, 1)), component_covariances(head)))
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 16
    lam: float = 5e-4
    max_epochs: int = 80
    seed: int = 0
    K: int = 3
    Len: int = 256
    hidden: tuple = (64, 128, 64)
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: Optional[int] = None

    def __post_init__(self):
        if min(self.lr, self.batch, self.max_epochs, self.K, self.Len) <= 0 or self.lam < 0:
            raise ValueError("training configuration values must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        self.hidden = tuple(self.hidden)


@dataclass
class TrainResult:
    params: KseParams
    curve: list = field(default_factory=list)
    best_epoch: int = 0


def _prepare(frames, Len):
    enc = [_encode(fc, Len) for fc in frames]
    feat = np.stack([e[0] for e in enc])
    classes = np.stack([e[1] for e in enc])
    err = np.array([fc.error_car() for fc in frames])
    return feat, classes, err


def _mean_nll(p, feat, classes, err, chunk=128):
    total = 0.0
    for i in range(0, len(feat), chunk):
        X = _assemble(feat[i : i + chunk], classes[i : i + chunk], p.se)
        raw, _ = _forward_batch(p, X)
        nll, _ = _nll_terms(raw, err[i : i + chunk], p.K)
        total += nll.sum()
    return total / len(feat)


def train(frames, cfg: TrainConfig = TrainConfig(), init: Optional[KseParams] = None) -> TrainResult:
    """Adam minibatch training; returns the parameters with the best validation NLL.

    A seeded ``val_fraction`` split is held out. ``curve`` holds one entry per
    epoch with the mean training loss (regularizer included) and validation
    NLL; entry 0 is the untrained model. With ``patience`` set, training stops
    after that many epochs without a validation improvement.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    p = init.copy() if init is not None else init_params(cfg.K, cfg.Len, cfg.hidden, seed=int(rng.integers(2**31)))
    feat, classes, err = _prepare(frames, p.Len)
    perm = rng.permutation(len(frames))
    n_val = int(round(cfg.val_fraction * len(frames)))
    if len(frames) - n_val < 1:
        n_val = 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if n_val == 0:
        val_idx = tr_idx

    def val_nll(params):
        return _mean_nll(params, feat[val_idx], classes[val_idx], err[val_idx])

    m = {k: np.zeros_like(v) for k, v in p.tensors().items()}
    s = {k: np.zeros_like(v) for k, v in p.tensors().items()}
    step = 0
    tr0 = _mean_nll(p, feat[tr_idx], classes[tr_idx], err[tr_idx]) + cfg.lam * p.weight_norm2()
    best_val = val_nll(p)
    best = p.copy()
    best_epoch = 0
    curve = [{"epoch": 0, "train_loss": tr0, "val_nll": best_val}]

    for epoch in range(1, cfg.max_epochs + 1):
        order = tr_idx[rng.permutation(len(tr_idx))]
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            bidx = np.sort(order[i : i + cfg.batch])
            X = _assemble(feat[bidx], classes[bidx], p.se)
            raw, cache = _forward_batch(p, X)
            nll, _ = _nll_terms(raw, err[bidx], p.K)
            B = len(bidx)
            gr = _backward_batch(p, raw, cache, err[bidx], classes[bidx], 1.0 / B)
            for n in WEIGHT_NAMES:
                gr[n] += 2.0 * cfg.lam * getattr(p, n)
            total += nll.sum() + B * cfg.lam * p.weight_norm2()
            count += B
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for n in PARAM_NAMES:
                g = gr[n]
                m[n] = cfg.beta1 * m[n] + (1 - cfg.beta1) * g
                s[n] = cfg.beta2 * s[n] + (1 - cfg.beta2) * g * g
                setattr(p, n, getattr(p, n) - cfg.lr * (m[n] / c1) / (np.sqrt(s[n] / c2) + cfg.eps))
        v = val_nll(p)
        curve.append({"epoch": epoch, "train_loss": total / count, "val_nll": v})
        log.debug("epoch %d train %.4f val %.4f", epoch, total / count, v)
        if v < best_val:
            best_val, best, best_epoch = v, p.copy(), epoch
        elif cfg.patience is not None and epoch - best_epoch >= cfg.patience:
            break
    return TrainResult(best, curve, best_epoch)


# ------------------------------------------------------------- persistence


def save_params(p: KseParams, path):
    header = {
        "format": "gmloc-kse",
        "version": FORMAT_VERSION,
        "K": p.K,
        "Len": p.Len,
        "shapes": {k: list(v.shape) for k, v in p.tensors().items()},
    }
    arrays = {"header": np.array(json.dumps(header)), **p.tensors()}
    # fixed entry timestamps keep the file byte-identical across runs (np.savez stamps the clock)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_params(path, K=None, Len=None) -> KseParams:
    """Load parameters, refusing files whose shapes disagree with their header or with ``K``/``Len``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "gmloc-kse" or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model file")
        tensors = {k: z[k] for k in PARAM_NAMES}
    for k, v in tensors.items():
        if list(v.shape) != header["shapes"][k]:
            raise ValueError(f"{path}: tensor {k} has shape {v.shape}, header says {header['shapes'][k]}")
    if K is not None and header["K"] != K:
        raise ValueError(f"{path}: model has K={header['K']}, expected {K}")
    if Len is not None and header["Len"] != Len:
        raise ValueError(f"{path}: model has Len={header['Len']}, expected {Len}")
    if tensors["W4"].shape[1] != 4 * header["K"] or tensors["W1"].shape[0] != 7:
        raise ValueError(f"{path}: layer shapes inconsistent with K={header['K']}")
    return KseParams(**tensors, K=header["K"], Len=header["Len"])


# ---------------------------------------------------------------- baseline


COV_FLOOR = 1e-6


@dataclass
class BaselineModel:
    """Piecewise-constant error covariance indexed by match count.

    ``edges`` are the inner bin boundaries on ``n_kpm``; bin ``i`` covers
    ``edges[i-1] <= n < edges[i]``.
    """

    edges: np.ndarray
    covs: np.ndarray

    def to_dict(self):
        return {"edges": self.edges.tolist(), "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["edges"], dtype=float), np.asarray(d["covs"], dtype=float))


def _floored_second_moment(e):
    C = e.T @ e / len(e)
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    C = (vecs * np.maximum(vals, COV_FLOOR)) @ vecs.T
    return 0.5 * (C + C.T)


def baseline_fit(frames, bins=5) -> BaselineModel:
    """Per-bin second moment of car-frame errors over quantile bins of ``n_kpm``.

    Errors are modelled as zero-mean, so the covariance is the raw second
    moment. Bins with fewer than 3 samples are merged into a neighbour; bins
    left empty use the global covariance.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty dataset")
    n = np.array([fc.n_kpm for fc in frames], dtype=float)
    err = np.array([fc.error_car() for fc in frames])
    edges = np.unique(np.quantile(n, np.linspace(0, 1, bins + 1))[1:-1])
    while len(edges):
        b = np.searchsorted(edges, n, side="right")
        counts = np.bincount(b, minlength=len(edges) + 1)
        small = np.flatnonzero((counts > 0) & (counts < 3))
        if not len(small):
            break
        i = small[0]
        edges = np.delete(edges, min(i, len(edges) - 1))
    b = np.searchsorted(edges, n, side="right")
    glob = _floored_second_moment(err)
    covs = np.array([
        _floored_second_moment(err[b == i]) if np.any(b == i) else glob
        for i in range(len(edges) + 1)
    ])
    return BaselineModel(edges, covs)


def baseline_predict(m: BaselineModel, fc: FrameContext) -> GaussMix2:
    i = int(np.searchsorted(m.edges, fc.n_kpm, side="right"))
    return GaussMix2.single(fc.r_hat, m.covs[i])
