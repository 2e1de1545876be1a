"""Small numpy MLP that classifies canonical patches and regresses curvature.

Input features per canonical point are ``(x, y, z, x^2, y^2, xy)``; a shared
ReLU trunk feeds a 4-logit class head and a 2-value head giving the
Gaussian curvature (signed) and the absolute mean curvature (softplus).
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptRecord, Diverged, FormatVersionMismatch, ShapeMismatch
from .geometry import SurfaceClass
from .spectral import CanonConfig, CanonicalPatch, canonicalize_batch

log = logging.getLogger(__name__)

N_CLASSES = len(SurfaceClass)
PARAM_BUDGET = 35_000


@dataclass(frozen=True)
class FeatureConfig:
    patch_size: int = 20
    polynomial: bool = True
    canonicalize: bool = True
    eigenvalues: int = 0  # smallest nonzero Laplacian eigenvalues appended
    canon: CanonConfig = field(default_factory=CanonConfig)

    @property
    def per_point(self) -> int:
        return 6 if self.polynomial else 3

    @property
    def dim(self) -> int:
        return self.patch_size * self.per_point + self.eigenvalues


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    w_cls: float = 0.5
    w_reg: float = 0.5
    optimizer: str = "adam"
    seed: int = 0
    hidden: tuple[int, ...] = (128, 64)
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs, self.w_cls + self.w_reg) <= 0:
            raise ValueError("learning rate, batch size, epochs and loss weights must be positive")
        if self.w_cls < 0 or self.w_reg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        total = self.w_cls + self.w_reg
        object.__setattr__(self, "w_cls", self.w_cls / total)
        object.__setattr__(self, "w_reg", self.w_reg / total)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def point_features(points: np.ndarray, polynomial: bool = True) -> np.ndarray:
    """Flatten ``(..., N, 3)`` points into per-point coordinate (+ quadratic) features."""
    if not polynomial:
        return points.reshape(points.shape[:-2] + (-1,))
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    feats = np.stack([x, y, z, x * x, y * y, x * y], axis=-1)
    return feats.reshape(points.shape[:-2] + (-1,))


def featurize(patch: CanonicalPatch, config: FeatureConfig | None = None) -> np.ndarray:
    cfg = config or FeatureConfig(patch_size=len(patch.canonical_points))
    f = point_features(np.asarray(patch.canonical_points), cfg.polynomial)
    if cfg.eigenvalues:
        f = np.concatenate([f, patch.eigenvalues[1 : 1 + cfg.eigenvalues]])
    return f


def prepare_features(points: np.ndarray, config: FeatureConfig, threads: int = 1, canonical=None):
    """Features for a stack of raw patches.

    Returns ``(features, ok)``; rows whose canonicalization failed are NaN
    and flagged False in ``ok``.  With canonicalization disabled the patch
    is only centered on its centroid and keeps its input order and pose.
    ``canonical`` may carry a precomputed :class:`BatchCanonical` for
    ``points`` (it must match ``config.canon``).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[1] != config.patch_size:
        raise ShapeMismatch(f"expected (B, {config.patch_size}, 3) patches, got {points.shape}")
    res = canonical
    if res is None and (config.canonicalize or config.eigenvalues):
        res = canonicalize_batch(points, config.canon, threads=threads)
    if config.canonicalize:
        P, ok = res.points, res.ok.copy()
    else:
        P = points - points.mean(axis=1, keepdims=True)
        ok = np.ones(len(points), dtype=bool)
    f = point_features(P, config.polynomial)
    if config.eigenvalues:
        f = np.concatenate([f, res.eigenvalues[:, 1 : 1 + config.eigenvalues]], axis=1)
        ok &= res.ok
    f[~ok] = np.nan
    return f, ok


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def _softplus(x):
    with np.errstate(invalid="ignore"):
        return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MlpModel:
    """Trunk ``input -> hidden... (ReLU)`` with class and curvature heads.

    ``params`` maps ``W0, b0, ..., Wc, bc, Wr, br`` to arrays; inputs are
    standardized with ``input_mean`` / ``input_scale`` before the trunk.
    """

    features: FeatureConfig
    hidden: tuple[int, ...]
    params: dict[str, np.ndarray]
    input_mean: np.ndarray
    input_scale: np.ndarray
    activation: str = "relu"
    opt_state: dict | None = None
    loss_curve: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, features: FeatureConfig, hidden=(128, 64), seed: int = 0) -> MlpModel:
        rng = np.random.default_rng(seed)
        sizes = [features.dim, *hidden]
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"W{i}"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            params[f"b{i}"] = np.zeros(fan_out)
        last = sizes[-1]
        params["Wc"] = rng.standard_normal((last, N_CLASSES)) * np.sqrt(1.0 / last)
        params["bc"] = np.zeros(N_CLASSES)
        params["Wr"] = rng.standard_normal((last, 2)) * np.sqrt(1.0 / last)
        params["br"] = np.zeros(2)
        return cls(features, tuple(hidden), params, np.zeros(features.dim), np.ones(features.dim))

    @property
    def param_names(self) -> list[str]:
        names = [f"{p}{i}" for i in range(len(self.hidden)) for p in ("W", "b")]
        return names + ["Wc", "bc", "Wr", "br"]

    @property
    def param_count(self) -> int:
        return int(sum(self.params[n].size for n in self.param_names))

    @property
    def input_dim(self) -> int:
        return self.features.dim


def forward_batch(model: MlpModel, X: np.ndarray, return_cache: bool = False):
    """Logits ``(B, 4)``, Gaussian curvature ``(B,)`` and ``|H|`` ``(B,)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeMismatch(f"expected (B, {model.input_dim}) features, got {X.shape}")
    p = model.params
    a = (X - model.input_mean) / model.input_scale
    acts = [a]
    for i in range(len(model.hidden)):
        a = np.maximum(a @ p[f"W{i}"] + p[f"b{i}"], 0.0)
        acts.append(a)
    logits = a @ p["Wc"] + p["bc"]
    reg = a @ p["Wr"] + p["br"]
    k_pred, h_pred = reg[:, 0], _softplus(reg[:, 1])
    if return_cache:
        return logits, k_pred, h_pred, (acts, reg)
    return logits, k_pred, h_pred


def forward(model: MlpModel, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (model.input_dim,):
        raise ShapeMismatch(f"expected {model.input_dim} features, got shape {f.shape}")
    logits, k, h = forward_batch(model, f[None])
    return logits[0], float(k[0]), float(h[0])


def _smooth_l1(d):
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def loss(logits, k_pred, h_abs_pred, label, k_gt, h_abs_gt, w_cls: float = 0.5, w_reg: float = 0.5) -> float:
    """Weighted cross-entropy plus smooth-L1 curvature terms, batch-averaged.

    Accepts single predictions or batches.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    label = np.atleast_1d(np.asarray(label, dtype=np.int64))
    ce = -_log_softmax(logits)[np.arange(len(label)), label]
    reg = _smooth_l1(np.atleast_1d(k_pred) - np.atleast_1d(k_gt)) + _smooth_l1(
        np.atleast_1d(h_abs_pred) - np.abs(np.atleast_1d(h_abs_gt))
    )
    return float(w_cls * ce.mean() + w_reg * reg.mean())


def loss_and_grad(model: MlpModel, X, labels, k_gt, h_gt, w_cls: float = 0.5, w_reg: float = 0.5):
    logits, k_pred, h_pred, (acts, reg) = forward_batch(model, X, return_cache=True)
    B = len(X)
    p = model.params
    logp = _log_softmax(logits)
    dk_err = k_pred - k_gt
    dh_err = h_pred - h_gt
    value = (
        w_cls * -logp[np.arange(B), labels].mean()
        + w_reg * (_smooth_l1(dk_err).mean() + _smooth_l1(dh_err).mean())
    )

    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits *= w_cls / B
    dreg = np.empty_like(reg)
    dreg[:, 0] = w_reg * np.clip(dk_err, -1.0, 1.0) / B
    dreg[:, 1] = w_reg * np.clip(dh_err, -1.0, 1.0) / B * _sigmoid(reg[:, 1])

    a = acts[-1]
    grads = {
        "Wc": a.T @ dlogits,
        "bc": dlogits.sum(axis=0),
        "Wr": a.T @ dreg,
        "br": dreg.sum(axis=0),
    }
    da = dlogits @ p["Wc"].T + dreg @ p["Wr"].T
    for i in reversed(range(len(model.hidden))):
        dz = da * (acts[i + 1] > 0)
        grads[f"W{i}"] = acts[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i:
            da = dz @ p[f"W{i}"].T
    return float(value), grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _fresh_state(model: MlpModel) -> dict:
    return {
        "step": 0,
        "epoch": 0,
        "m": {n: np.zeros_like(model.params[n]) for n in model.param_names},
        "v": {n: np.zeros_like(model.params[n]) for n in model.param_names},
    }


def _step(model: MlpModel, grads: dict, cfg: TrainConfig) -> None:
    st = model.opt_state
    st["step"] += 1
    if cfg.optimizer == "sgd":
        for n in model.param_names:
            model.params[n] -= cfg.learning_rate * grads[n]
        return
    t = st["step"]
    corr1 = 1.0 - cfg.beta1**t
    corr2 = 1.0 - cfg.beta2**t
    for n in model.param_names:
        g = grads[n]
        m = st["m"][n]
        v = st["v"][n]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        model.params[n] -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + 1e-8)


def train_arrays(
    X: np.ndarray,
    labels: np.ndarray,
    k_gt: np.ndarray,
    h_gt: np.ndarray,
    features: FeatureConfig,
    config: TrainConfig | None = None,
    model: MlpModel | None = None,
) -> MlpModel:
    """Minibatch training on precomputed features.

    Passing ``model`` resumes from it (weights, input scaling and optimizer
    state are kept); otherwise a fresh model is initialized from the seed.
    """
    cfg = config or TrainConfig()
    ok = np.all(np.isfinite(X), axis=1)
    X, labels, k_gt, h_gt = X[ok], labels[ok], k_gt[ok], np.abs(h_gt[ok])
    if len(X) == 0:
        raise ValueError("no usable training samples")
    if model is None:
        model = MlpModel.init(features, cfg.hidden, cfg.seed)
        model.input_mean = X.mean(axis=0)
        model.input_scale = X.std(axis=0) + 1e-8
    elif model.input_dim != X.shape[1]:
        raise ShapeMismatch(f"model expects {model.input_dim} features, data has {X.shape[1]}")
    if model.opt_state is None:
        model.opt_state = _fresh_state(model)
    last_finite = model.loss_curve[-1] if model.loss_curve else None
    for _ in range(cfg.epochs):
        epoch = model.opt_state["epoch"]
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            value, grads = loss_and_grad(model, X[idx], labels[idx], k_gt[idx], h_gt[idx], cfg.w_cls, cfg.w_reg)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise Diverged(f"non-finite loss in epoch {epoch}", last_finite)
            last_finite = value
            model.loss_curve.append(value)
            _step(model, grads, cfg)
        model.opt_state["epoch"] += 1
        log.debug("epoch %d loss %.5f", epoch, value)
    return model


def train(samples, config: TrainConfig | None = None, features: FeatureConfig | None = None,
          model: MlpModel | None = None, threads: int = 1) -> MlpModel:
    """Canonicalize, featurize and fit ``samples`` (a list of :class:`Sample`)."""
    from .synthdata import to_arrays

    points, labels, k, h = to_arrays(samples)
    feats = features or (model.features if model else FeatureConfig(patch_size=points.shape[1]))
    X, _ = prepare_features(points, feats, threads)
    return train_arrays(X, labels, k, h, feats, config, model)


def predict(model: MlpModel, points: np.ndarray, threads: int = 1, batch_size: int = 4096):
    """Run the full pipeline on raw patches ``(B, N, 3)``.

    Returns ``(logits, k_pred, h_pred, ok)``; failed rows are NaN.
    """
    X, ok = prepare_features(points, model.features, threads)
    outs = [forward_batch(model, X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
    if not outs:
        return np.empty((0, N_CLASSES)), np.empty(0), np.empty(0), ok
    logits, k, h = (np.concatenate(parts) for parts in zip(*outs))
    return logits, k, h, ok


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"CNM1"
MODEL_VERSION = 1
_FLAG_POLY, _FLAG_CANON, _FLAG_OPT, _FLAG_SELF_LOOPS = 1, 2, 4, 8
_LAPLACIANS = ("normalized", "unnormalized")
_ANCHORS = ("nearest", "origin")
_HEAD = struct.Struct("<4sIIIIII")  # magic, version, patch_size, flags, n_eig, input_dim, n_hidden
_CANON = struct.Struct("<dIIdddd")  # t, laplacian, anchor, degeneracy, centroid, axis, jacobi tol


def save_model(model: MlpModel, path) -> None:
    """Write a ``CNM1`` checkpoint: header, float64 arrays row-major, CRC32."""
    fc = model.features
    c = fc.canon
    flags = (_FLAG_POLY * fc.polynomial) | (_FLAG_CANON * fc.canonicalize) | (
        _FLAG_OPT * (model.opt_state is not None)) | (_FLAG_SELF_LOOPS * c.self_loops)
    parts = [
        _HEAD.pack(MODEL_MAGIC, MODEL_VERSION, fc.patch_size, flags, fc.eigenvalues, fc.dim, len(model.hidden)),
        struct.pack(f"<{len(model.hidden)}I", *model.hidden),
        _CANON.pack(c.t, _LAPLACIANS.index(c.laplacian), _ANCHORS.index(c.anchor),
                    c.degeneracy_tol, c.centroid_tol, c.axis_tol, c.jacobi_tol),
        struct.pack("<I", c.max_sweeps),
    ]
    as_bytes = lambda arrays: [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]  # noqa: E731
    parts += as_bytes([model.input_mean, model.input_scale] + [model.params[n] for n in model.param_names])
    if model.opt_state is not None:
        parts.append(struct.pack("<QQ", model.opt_state["step"], model.opt_state["epoch"]))
        parts += as_bytes([model.opt_state[k][n] for k in ("m", "v") for n in model.param_names])
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def load_model(path, patch_size: int | None = None) -> MlpModel:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size + 4:
        raise CorruptRecord("checkpoint truncated")
    magic, version, ps, flags, n_eig, input_dim, n_hidden = _HEAD.unpack_from(data)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise FormatVersionMismatch(f"not a version-{MODEL_VERSION} checkpoint")
    if patch_size is not None and ps != patch_size:
        raise FormatVersionMismatch(f"checkpoint patch size {ps} does not match {patch_size}")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptRecord("checkpoint checksum mismatch")
    off = _HEAD.size
    hidden = struct.unpack_from(f"<{n_hidden}I", data, off)
    off += 4 * n_hidden
    t, lap, anchor, deg_tol, c_tol, a_tol, j_tol = _CANON.unpack_from(data, off)
    off += _CANON.size
    (max_sweeps,) = struct.unpack_from("<I", data, off)
    off += 4
    canon = CanonConfig(t=t, laplacian=_LAPLACIANS[lap], anchor=_ANCHORS[anchor],
                        self_loops=bool(flags & _FLAG_SELF_LOOPS), degeneracy_tol=deg_tol,
                        centroid_tol=c_tol, axis_tol=a_tol, jacobi_tol=j_tol, max_sweeps=max_sweeps)
    features = FeatureConfig(ps, bool(flags & _FLAG_POLY), bool(flags & _FLAG_CANON), n_eig, canon)
    if features.dim != input_dim:
        raise FormatVersionMismatch("input dimension inconsistent with feature flags")
    model = MlpModel.init(features, hidden)

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        if off + 8 * n > len(payload):
            raise CorruptRecord("checkpoint truncated")
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        return a

    model.input_mean = take((input_dim,))
    model.input_scale = take((input_dim,))
    for n in model.param_names:
        model.params[n] = take(model.params[n].shape)
    if flags & _FLAG_OPT:
        step, epoch = struct.unpack_from("<QQ", payload, off)
        off += 16
        m = {n: take(model.params[n].shape) for n in model.param_names}
        v = {n: take(model.params[n].shape) for n in model.param_names}
        model.opt_state = {"step": step, "epoch": epoch, "m": m, "v": v}
    if off != len(payload):
        raise CorruptRecord("trailing bytes in checkpoint")
    return model


def default_model(patch_size: int = 20, seed: int = 0) -> MlpModel:
    return MlpModel.init(FeatureConfig(patch_size=patch_size), TrainConfig().hidden, seed)


__all__ = [
    "FeatureConfig", "TrainConfig", "MlpModel", "featurize", "point_features", "prepare_features",
    "forward", "forward_batch", "loss", "loss_and_grad", "train", "train_arrays", "predict",
    "save_model", "load_model", "default_model",
]
