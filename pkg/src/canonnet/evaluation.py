"""Metrics, ablation sweeps and a descriptor-matching harness.

Curvature quality is measured with the rectified error
``|pred - gt| / max(|gt|, 1)`` aggregated as an RMSE.  Registration quality
is measured by feature match recall (FMR) on synthetic scenes built from a
handful of rigidly placed quadratic patches.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import NoCorrespondences, ShapeMismatch
from .geometry import (
    RigidTransform,
    SurfaceClass,
    add_noise,
    as_cloud,
    pairwise_sq_dists,
    random_rotation,
)
from .model import FeatureConfig, MlpModel, TrainConfig, prepare_features, predict, train_arrays, forward_batch
from .spectral import CanonConfig, canonicalize_batch
from .synthdata import DatasetSpec, generate_dataset, sample_surface_of_class, to_arrays

N_CLASSES = len(SurfaceClass)
DEFAULT_RESOLUTIONS = (100, 50, 20)
OUTPUTS_PER_LEVEL = N_CLASSES + 2


# ---------------------------------------------------------------------------
# curvature metrics
# ---------------------------------------------------------------------------


def rectified_error(pred, gt):
    """``|pred - gt| / max(|gt|, 1)``, elementwise; scalars in, float out."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = np.abs(pred - gt) / np.maximum(np.abs(gt), 1.0)
    return float(err) if err.ndim == 0 else err


@dataclass(frozen=True)
class CurvatureErrors:
    d_k_rmse: float
    d_h_rmse: float
    d_k: np.ndarray = field(repr=False)
    d_h: np.ndarray = field(repr=False)


def curvature_errors(k_pred, h_pred, k_gt, h_gt) -> CurvatureErrors:
    d_k = np.atleast_1d(rectified_error(k_pred, k_gt))
    d_h = np.atleast_1d(rectified_error(h_pred, h_gt))
    rmse = lambda d: float(np.sqrt(np.mean(d * d))) if d.size else float("nan")  # noqa: E731
    return CurvatureErrors(rmse(d_k), rmse(d_h), d_k, d_h)


@dataclass(frozen=True)
class EvalReport:
    """Classification and curvature quality of a model on a labelled set.

    Patches whose canonicalization fails are counted in ``n_failed`` and
    excluded from every metric.  ``confusion[i, j]`` counts true class ``i``
    predicted as ``j``.
    """

    accuracy: float
    d_k_rmse: float
    d_h_rmse: float
    confusion: np.ndarray
    n_samples: int
    n_failed: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "d_k_rmse": self.d_k_rmse,
            "d_h_rmse": self.d_h_rmse,
            "confusion": self.confusion.tolist(),
            "classes": [c.name.lower() for c in SurfaceClass],
            "n_samples": self.n_samples,
            "n_failed": self.n_failed,
        }


def _check_patch_size(model: MlpModel, points: np.ndarray) -> None:
    if points.ndim != 3 or points.shape[1] != model.features.patch_size:
        raise ShapeMismatch(
            f"model expects {model.features.patch_size}-point patches, data has shape {points.shape}"
        )


def evaluate_arrays(model: MlpModel, points, labels, k_gt, h_gt, threads: int = 1) -> EvalReport:
    points = np.asarray(points, dtype=np.float64)
    _check_patch_size(model, points)
    logits, k, h, ok = predict(model, points, threads=threads)
    labels = np.asarray(labels)[ok]
    pred = np.argmax(logits[ok], axis=1)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    errs = curvature_errors(k[ok], h[ok], np.asarray(k_gt)[ok], np.asarray(h_gt)[ok])
    acc = float(np.mean(pred == labels)) if len(labels) else float("nan")
    return EvalReport(acc, errs.d_k_rmse, errs.d_h_rmse, confusion, int(len(points)), int((~ok).sum()))


def evaluate(model: MlpModel, samples, threads: int = 1) -> EvalReport:
    return evaluate_arrays(model, *to_arrays(samples, model.features.patch_size), threads=threads)


def evaluate_curvature(model: MlpModel, samples, threads: int = 1) -> CurvatureErrors:
    """RMSE of the rectified ``K`` and ``|H|`` errors over a dataset."""
    points, _, k_gt, h_gt = to_arrays(samples, model.features.patch_size)
    _check_patch_size(model, points)
    _, k, h, ok = predict(model, points, threads=threads)
    return curvature_errors(k[ok], h[ok], k_gt[ok], h_gt[ok])


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------


def farthest_point_sampling(points, k: int, start: int | None = None) -> np.ndarray:
    """Indices of ``k`` points chosen greedily to maximize coverage.

    Starts from ``start`` or, by default, from the point farthest from the
    centroid, so the selection depends only on inter-point distances and is
    unchanged by rigid motions and input reordering (up to exact ties).
    """
    X = as_cloud(points)
    n = len(X)
    if not 0 < k <= n:
        raise ValueError(f"cannot pick {k} of {n} points")
    if start is None:
        c = X - X.mean(axis=0)
        start = int(np.argmax(np.einsum("ij,ij->i", c, c)))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    d = np.sum((X - X[start]) ** 2, axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((X - X[chosen[i]]) ** 2, axis=1))
    return chosen


def nearest_neighbors(points, queries, k: int) -> np.ndarray:
    """``(Q, k)`` indices of the ``k`` nearest points to each query, nearest first."""
    X = np.asarray(points, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    diff = Q[:, None, :] - X[None, :, :]
    d = np.sum(diff * diff, axis=-1)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx


def mean_nn_spacing(points) -> float:
    X = as_cloud(points, min_points=2)
    D = pairwise_sq_dists(X)
    np.fill_diagonal(D, np.inf)
    return float(np.mean(np.sqrt(D.min(axis=1))))


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Descriptor:
    """Concatenated ``(logits, k_pred, h_abs_pred)`` over resolution levels.

    ``missing[r]`` marks levels whose patch could not be canonicalized; their
    segment of ``values`` is NaN.
    """

    values: np.ndarray
    resolutions: tuple[int, ...]
    missing: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def extract_patches(cloud, centers, resolutions=DEFAULT_RESOLUTIONS, patch_size: int = 20) -> np.ndarray:
    """Multi-resolution patches around ``centers`` (indices into ``cloud``).

    For a level ``r`` the ``r`` nearest neighbours of the center are reduced
    to ``patch_size`` points by farthest-point sampling started at the center,
    so coarser levels cover a wider neighbourhood with the same point budget.
    Returns ``(len(centers), len(resolutions), patch_size, 3)``.
    """
    X = as_cloud(cloud)
    centers = np.atleast_1d(np.asarray(centers, dtype=np.int64))
    resolutions = tuple(int(r) for r in resolutions)
    if any(r < patch_size for r in resolutions):
        raise ValueError(f"resolutions must be at least the patch size {patch_size}")
    if max(resolutions) > len(X):
        raise ValueError(f"cloud has {len(X)} points, fewer than resolution {max(resolutions)}")
    nbrs = nearest_neighbors(X, X[centers], max(resolutions))
    out = np.empty((len(centers), len(resolutions), patch_size, 3))
    for i, nb in enumerate(nbrs):
        for j, r in enumerate(resolutions):
            local = X[nb[:r]]
            pick = farthest_point_sampling(local, patch_size, start=0) if r > patch_size else slice(None)
            out[i, j] = local[pick]
    return out


def describe_patches(model: MlpModel, patches: np.ndarray, threads: int = 1):
    """Descriptor matrix for ``(K, R, patch_size, 3)`` patches.

    Returns ``(values, missing)`` with ``values`` of shape ``(K, R * 6)``.
    """
    K, R = patches.shape[:2]
    flat = patches.reshape(K * R, *patches.shape[2:])
    logits, k, h, ok = predict(model, flat, threads=threads)
    out = np.concatenate([logits, k[:, None], h[:, None]], axis=1)
    out[~ok] = np.nan
    return out.reshape(K, R * OUTPUTS_PER_LEVEL), ~ok.reshape(K, R)


def build_descriptor(cloud, model: MlpModel, resolutions=DEFAULT_RESOLUTIONS, center: int | None = None) -> Descriptor:
    """Descriptor of the neighbourhood of ``center`` (default: the point
    nearest the centroid)."""
    X = as_cloud(cloud)
    if center is None:
        c = X - X.mean(axis=0)
        center = int(np.argmin(np.einsum("ij,ij->i", c, c)))
    resolutions = tuple(int(r) for r in resolutions)
    patches = extract_patches(X, [center], resolutions, model.features.patch_size)
    values, missing = describe_patches(model, patches)
    return Descriptor(values[0], resolutions, missing[0])


def descriptor_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean distances between descriptor rows, over commonly present entries.

    Missing (NaN) entries are skipped and the sum is rescaled to the full
    length; pairs sharing no entries are infinitely far apart.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    diff = A[:, None, :] - B[None, :, :]
    present = np.isfinite(diff)
    sq = np.where(present, diff * diff, 0.0).sum(axis=-1)
    count = present.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.sqrt(sq * A.shape[1] / count)
    d[count == 0] = np.inf
    return d


def mutual_nearest_neighbors(D: np.ndarray) -> np.ndarray:
    """``(M, 2)`` index pairs ``(i, j)`` that are each other's nearest neighbour."""
    D = np.asarray(D, dtype=np.float64)
    if D.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    fwd = np.argmin(D, axis=1)
    bwd = np.argmin(D, axis=0)
    i = np.flatnonzero((bwd[fwd] == np.arange(len(fwd))) & np.isfinite(D[np.arange(len(fwd)), fwd]))
    return np.column_stack([i, fwd[i]]).astype(np.int64)


# ---------------------------------------------------------------------------
# feature match recall
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchReport:
    """``fmr`` is the share of mutual matches landing within ``tau`` of the
    true position; ``inlier_fraction`` is the number of correct matches over
    all keypoints, the inlier rate a RANSAC stage would see."""

    fmr: float
    n_correspondences: int
    tau: float
    inlier_fraction: float
    n_keypoints: int
    residuals: np.ndarray = field(repr=False)

    def recall_at(self, tau: float) -> float:
        return float(np.mean(self.residuals < tau))


def feature_match_recall(
    source,
    target,
    gt: RigidTransform,
    model: MlpModel,
    tau: float | None = None,
    n_keypoints: int = 64,
    resolutions=DEFAULT_RESOLUTIONS,
    keypoints: str = "correspondence",
    threads: int = 1,
) -> MatchReport:
    """Match multi-resolution descriptors between two clouds.

    ``gt`` maps source coordinates into the target frame.  Source keypoints
    come from farthest-point sampling.  With ``keypoints="correspondence"``
    each target keypoint is the target point nearest to the mapped source
    keypoint, so every keypoint has a true partner; ``"fps"`` samples the
    target independently.  ``tau`` defaults to twice the mean
    nearest-neighbour spacing of the source.
    """
    S, T = as_cloud(source), as_cloud(target)
    if tau is None:
        tau = 2.0 * mean_nn_spacing(S)
    if tau <= 0:
        raise ValueError("tau must be positive")
    ps = model.features.patch_size
    ks = farthest_point_sampling(S, min(n_keypoints, len(S)))
    mapped = gt.apply(S[ks])
    if keypoints == "correspondence":
        kt = nearest_neighbors(T, mapped, 1)[:, 0]
    elif keypoints == "fps":
        kt = farthest_point_sampling(T, min(n_keypoints, len(T)))
    else:
        raise ValueError(f"unknown keypoint mode {keypoints!r}")
    ds, _ = describe_patches(model, extract_patches(S, ks, resolutions, ps), threads)
    dt, _ = describe_patches(model, extract_patches(T, kt, resolutions, ps), threads)
    pairs = mutual_nearest_neighbors(descriptor_distances(ds, dt))
    if len(pairs) == 0:
        raise NoCorrespondences("no mutual nearest neighbours between the descriptor sets")
    residuals = np.linalg.norm(mapped[pairs[:, 0]] - T[kt[pairs[:, 1]]], axis=1)
    correct = int(np.sum(residuals < tau))
    return MatchReport(correct / len(pairs), len(pairs), float(tau), correct / len(ks), len(ks), residuals)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Unions of quadratic patches spread over a ring.

    Each patch covers ``[-half_width, half_width]^2`` in its own frame with
    ``points_per_patch`` samples, is rotated at random and centered
    ``spacing`` apart from its neighbours.
    """

    min_patches: int = 3
    max_patches: int = 6
    points_per_patch: int = 60
    half_width: float = 1.0
    spacing: float = 2.0
    coefficient_range: tuple[float, float] = (-1.0, 1.0)


def make_scene(rng: np.random.Generator, spec: SceneSpec | None = None) -> np.ndarray:
    spec = spec or SceneSpec()
    n = int(rng.integers(spec.min_patches, spec.max_patches + 1))
    radius = spec.spacing / (2.0 * math.sin(math.pi / n))
    parts = []
    for j in range(n):
        cls = SurfaceClass(int(rng.integers(N_CLASSES)))
        surface = sample_surface_of_class(cls, rng, spec.coefficient_range)
        xy = rng.uniform(-spec.half_width, spec.half_width, size=(spec.points_per_patch, 2))
        local = np.column_stack([xy, surface.height(xy[:, 0], xy[:, 1])])
        angle = 2.0 * math.pi * j / n
        center = radius * np.array([math.cos(angle), math.sin(angle), 0.0])
        parts.append(local @ random_rotation(rng).T + center)
    return np.concatenate(parts)


@dataclass(frozen=True)
class FmrSummary:
    identity: float
    noisy: float
    unrelated: float
    n_scenes: int
    noise: float

    def to_dict(self) -> dict:
        return asdict(self)


def fmr_benchmark(
    model: MlpModel,
    n_scenes: int = 50,
    noise: float = 0.005,
    seed: int = 0,
    scene: SceneSpec | None = None,
    resolutions=DEFAULT_RESOLUTIONS,
    threads: int = 1,
) -> FmrSummary:
    """Mean FMR over ``n_scenes`` scenes for three pairings: a cloud with
    itself, with a noisy rigidly moved copy, and with an unrelated scene.

    ``noise`` is relative to the scene radius.  A pairing without any mutual
    match counts as FMR 0.
    """

    def fmr(src, tgt, xf):
        try:
            return feature_match_recall(src, tgt, xf, model, resolutions=resolutions, threads=threads).fmr
        except NoCorrespondences:
            return 0.0

    scores = np.zeros((n_scenes, 3))
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        src = make_scene(rng, scene)
        xf = RigidTransform.random(rng)
        noisy = xf.apply(add_noise(src, noise, rng))
        other = xf.apply(make_scene(rng, scene))
        scores[i] = (
            fmr(src, src, RigidTransform.identity()),
            fmr(src, noisy, xf),
            fmr(src, other, xf),
        )
    ident, noisy, unrelated = scores.mean(axis=0)
    return FmrSummary(float(ident), float(noisy), float(unrelated), n_scenes, noise)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ORDERING_COLUMNS = ("laplacian", "t", "noise", "consistency", "n_patches", "n_skipped")
PIPELINE_COLUMNS = ("config", "seed", "noise", "accuracy", "n_test", "n_failed")


def ablate_ordering_robustness(
    temperatures=(0.5, 1.0, 2.0, 5.0),
    laplacians=("normalized", "unnormalized"),
    noise_levels=(0.0, 0.01, 0.03, 0.05, 0.07, 0.10),
    n_patches: int = 200,
    patch_size: int = 20,
    seed: int = 0,
    threads: int = 1,
) -> list[dict]:
    """Ordering consistency between clean and noisy copies of each patch.

    One row per ``(laplacian, t, noise)`` cell.  Every cell sees the same
    clean patches and, for a given noise level, the same noise draw, so rows
    differ only in the canonicalization settings.  Patches failing on either
    side are skipped and counted.
    """
    spec = DatasetSpec(-(-n_patches // N_CLASSES), patch_size, noise_levels=(0.0,), seed=seed)
    clean = to_arrays(generate_dataset(spec))[0][:n_patches]
    noisy = [add_noise(clean, lvl, np.random.default_rng([seed, j])) for j, lvl in enumerate(noise_levels)]
    rows = []
    for lap in laplacians:
        for t in temperatures:
            cfg = CanonConfig(t=float(t), laplacian=lap)
            ref = canonicalize_batch(clean, cfg, threads=threads)
            for lvl, pts in zip(noise_levels, noisy):
                res = canonicalize_batch(pts, cfg, threads=threads)
                ok = ref.ok & res.ok
                agree = np.mean(ref.permutation[ok] == res.permutation[ok], axis=1)
                rows.append({
                    "laplacian": lap,
                    "t": float(t),
                    "noise": float(lvl),
                    "consistency": float(agree.mean()) if ok.any() else float("nan"),
                    "n_patches": int(ok.sum()),
                    "n_skipped": int((~ok).sum()),
                })
    return rows


ABLATION_CONFIGS = {
    "full": dict(canonicalize=True, polynomial=True, eigenvalues=0),
    "no_canon": dict(canonicalize=False, polynomial=True, eigenvalues=0),
    "no_poly": dict(canonicalize=True, polynomial=False, eigenvalues=0),
    "eigen": dict(canonicalize=True, polynomial=True, eigenvalues=5),
}


def random_pose(points: np.ndarray, rng: np.random.Generator, max_translation: float = 10.0) -> np.ndarray:
    """Apply an independent random rigid motion and point permutation to each patch."""
    out = np.empty_like(points)
    for i, P in enumerate(points):
        R = random_rotation(rng)
        t = rng.uniform(-max_translation, max_translation, 3)
        out[i] = (P @ R.T + t)[rng.permutation(len(P))]
    return out


@dataclass(frozen=True)
class PipelineAblation:
    """Budget of the feature ablation; every configuration gets the same one."""

    noise_levels: tuple[float, ...] = (0.0, 0.01, 0.03, 0.05)
    train_noise_levels: tuple[float, ...] = (0.0, 0.01, 0.03)
    seeds: tuple[int, ...] = (0, 1, 2)
    train_per_class: int = 5000
    test_per_class: int = 500
    patch_size: int = 20
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60))


def ablate_pipeline(
    ablation: PipelineAblation | None = None,
    configs: dict | None = None,
    threads: int = 1,
) -> list[dict]:
    """Test accuracy per feature configuration, seed and noise level.

    Training and test patches are shown in random poses and orders so that
    configurations without canonicalization face the nuisance the pipeline
    is meant to remove.
    """
    ab = ablation or PipelineAblation()
    configs = configs or ABLATION_CONFIGS
    canon = CanonConfig()
    rows = []
    for seed in ab.seeds:
        spec = DatasetSpec(ab.train_per_class, ab.patch_size, noise_levels=ab.train_noise_levels, seed=1000 + seed)
        P, labels, k, h = to_arrays(generate_dataset(spec))
        P = random_pose(P, np.random.default_rng([seed, 1]))
        train_canon = canonicalize_batch(P, canon, threads=threads)

        tests = []
        clean_spec = DatasetSpec(ab.test_per_class, ab.patch_size, noise_levels=(0.0,), seed=2000 + seed)
        Pt, lt, _, _ = to_arrays(generate_dataset(clean_spec))
        for j, lvl in enumerate(ab.noise_levels):
            rng = np.random.default_rng([seed, 2, j])
            Q = random_pose(add_noise(Pt, lvl, rng), rng)
            tests.append((lvl, Q, canonicalize_batch(Q, canon, threads=threads)))

        for name, flags in configs.items():
            fc = FeatureConfig(patch_size=ab.patch_size, canon=canon, **flags)
            X, _ = prepare_features(P, fc, canonical=train_canon)
            model = train_arrays(X, labels, k, h, fc, replace(ab.train, seed=seed))
            for lvl, Q, qc in tests:
                Xt, ok = prepare_features(Q, fc, canonical=qc)
                logits = forward_batch(model, Xt[ok])[0]
                acc = float(np.mean(np.argmax(logits, axis=1) == lt[ok]))
                rows.append({
                    "config": name, "seed": int(seed), "noise": float(lvl),
                    "accuracy": acc, "n_test": int(ok.sum()), "n_failed": int((~ok).sum()),
                })
    return rows


def ablation_deltas(rows: list[dict]) -> dict:
    """Accuracy differences in percentage points, averaged over seeds and noise.

    ``canonicalization`` = full - no_canon, ``polynomial`` = full - no_poly,
    ``eigenvalues`` = eigen - full.
    """
    acc = {}
    for r in rows:
        acc.setdefault(r["config"], []).append(r["accuracy"])
    mean = {k: 100.0 * float(np.mean(v)) for k, v in acc.items()}
    out = {f"accuracy_{k}": v for k, v in mean.items()}
    pairs = {"canonicalization": ("full", "no_canon"), "polynomial": ("full", "no_poly"), "eigenvalues": ("eigen", "full")}
    for name, (a, b) in pairs.items():
        if a in mean and b in mean:
            out[name] = mean[a] - mean[b]
    return out


def write_csv(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})
