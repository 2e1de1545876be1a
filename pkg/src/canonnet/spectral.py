"""Spectral canonicalization of local point-cloud patches.

Pipeline: heat-kernel graph -> normalized Laplacian -> Fiedler vector ->
sort points by it -> rotate the centroid onto +z -> rotate about z so the
landmark (largest Fiedler entry) lies in the half-plane ``y = 0, x > 0``.

Everything is vectorized over a leading batch axis.  Each patch's result is
computed with elementwise operations only, so it does not depend on which
other patches share its batch (threaded and serial runs agree bit-for-bit).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    CANON_ERRORS,
    DegenerateCentroid,
    DegenerateInput,
    DegenerateLandmark,
    DegenerateSpectrum,
    NoConvergence,
    SignAmbiguous,
    TiedEmbedding,
)
from .geometry import as_cloud, pairwise_sq_dists, rotate

DUPLICATE_TOL = 1e-12
TIE_TOL = 1e-12
MAX_JACOBI_N = 512

OK = 0
_CODE = {exc: i + 1 for i, exc in enumerate(CANON_ERRORS)}
_REASON = {
    DegenerateInput: "coincident points",
    DegenerateSpectrum: "repeated Laplacian eigenvalue leaves the Fiedler vector undefined",
    SignAmbiguous: "two Fiedler entries tie for largest magnitude",
    TiedEmbedding: "two Fiedler entries coincide",
    DegenerateCentroid: "reordered centroid at the anchor",
    DegenerateLandmark: "landmark on the z-axis",
}


@dataclass(frozen=True)
class CanonConfig:
    """Knobs of the canonicalization pipeline.

    ``anchor`` selects how translation is removed before ordering:
    ``"nearest"`` subtracts the input point closest to the centroid (an
    intrinsic choice, so the result is invariant to translations), while
    ``"origin"`` keeps coordinates as given, for patches already expressed
    relative to their query point.
    """

    t: float = 1.0
    laplacian: str = "normalized"
    self_loops: bool = False
    anchor: str = "nearest"
    degeneracy_tol: float = 1e-8
    centroid_tol: float = 1e-9
    axis_tol: float = 1e-9
    jacobi_tol: float = 1e-12
    max_sweeps: int = 64

    def __post_init__(self):
        if self.t <= 0:
            raise ValueError("temperature t must be positive")
        if self.laplacian not in ("normalized", "unnormalized"):
            raise ValueError(f"unknown laplacian kind {self.laplacian!r}")
        if self.anchor not in ("nearest", "origin"):
            raise ValueError(f"unknown anchor {self.anchor!r}")


@dataclass(frozen=True)
class WeightedGraph:
    weights: np.ndarray
    temperature: float


@dataclass(frozen=True)
class SpectralEmbedding:
    fiedler: np.ndarray
    eigenvalue: float
    spectral_gap: float
    eigenvalues: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class CanonicalPatch:
    canonical_points: np.ndarray
    permutation: np.ndarray  # output row i is input point permutation[i]
    r1: np.ndarray
    r2: np.ndarray
    centroid_norm: float
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    eigenvalues: np.ndarray | None = field(default=None, repr=False)

    @property
    def rotation(self) -> np.ndarray:
        return self.r2 @ self.r1


# ---------------------------------------------------------------------------
# graph and Laplacian
# ---------------------------------------------------------------------------


def _heat_kernel(sq_dists: np.ndarray, t: float, self_loops: bool) -> np.ndarray:
    W = np.exp(-sq_dists / t)
    n = W.shape[-1]
    W[..., np.arange(n), np.arange(n)] = 1.0 if self_loops else 0.0
    return W


def build_graph(cloud, t: float = 1.0, self_loops: bool = False) -> WeightedGraph:
    """Fully connected heat-kernel graph ``W_ij = exp(-|x_i - x_j|^2 / t)``.

    The diagonal is zero unless ``self_loops`` is set, in which case the
    literal kernel value 1 is kept.
    """
    if t <= 0:
        raise ValueError("temperature t must be positive")
    X = as_cloud(cloud, min_points=3)
    D2 = pairwise_sq_dists(X)
    off = D2 + np.diag(np.full(len(X), np.inf))
    if off.min() < DUPLICATE_TOL**2:
        raise DegenerateInput("coincident points make the ordering ill-defined")
    return WeightedGraph(_heat_kernel(D2, t, self_loops), float(t))


def _normalized(W: np.ndarray) -> np.ndarray:
    deg = W.sum(axis=-1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    L = -(W * inv_sqrt[..., :, None] * inv_sqrt[..., None, :])
    n = W.shape[-1]
    L[..., np.arange(n), np.arange(n)] += 1.0
    return L


def _unnormalized(W: np.ndarray) -> np.ndarray:
    L = -W
    n = W.shape[-1]
    L[..., np.arange(n), np.arange(n)] += W.sum(axis=-1)
    return L


def normalized_laplacian(g: WeightedGraph) -> np.ndarray:
    """``I - D^{-1/2} W D^{-1/2}``; spectrum in ``[0, 2]`` with kernel ``D^{1/2} 1``."""
    if np.any(g.weights.sum(axis=-1) <= 0):
        raise ValueError("every vertex needs positive degree")
    return _normalized(g.weights)


def unnormalized_laplacian(g: WeightedGraph) -> np.ndarray:
    """Combinatorial Laplacian ``D - W``."""
    return _unnormalized(g.weights)


# ---------------------------------------------------------------------------
# Jacobi eigensolver
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Sweep schedule of ``n - 1`` rounds of disjoint index pairs (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p), max(p)) for p in pairs if max(p) < n]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(A: np.ndarray, upper: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    off = A[upper]
    return np.sqrt(2.0 * np.sum(off * off, axis=0))


def jacobi_eigensolve(A, tol: float = 1e-12, max_sweeps: int = 64):
    """Cyclic Jacobi eigendecomposition of symmetric matrices.

    Accepts one ``(N, N)`` matrix or a stack ``(..., N, N)``.  Sweeps stop per
    matrix once its off-diagonal Frobenius norm is at most ``tol * |A|_F``;
    converged matrices are frozen, so a matrix's result does not depend on
    the rest of the stack.  Each sweep visits the pairs in round-robin order,
    so the ``N // 2`` disjoint rotations of a round are applied together.

    Returns
    -------
    eigenvalues : (..., N) ascending
    eigenvectors : (..., N, N) with orthonormal columns
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {A.shape}")
    n = A.shape[-1]
    if n > MAX_JACOBI_N:
        raise ValueError(f"matrix order {n} exceeds {MAX_JACOBI_N}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix entries must be finite")
    batch_shape = A.shape[:-2]
    A = A.reshape(-1, n, n)
    scale = np.maximum(np.abs(A).max(axis=(-2, -1), initial=0.0), 1.0)
    if np.any(np.abs(A - A.swapaxes(-1, -2)).max(axis=(-2, -1), initial=0.0) > 1e-10 * scale):
        raise ValueError("matrix is not symmetric")
    # batch on the last axis keeps the row/column gathers contiguous
    A = np.ascontiguousarray((0.5 * (A + A.swapaxes(-1, -2))).transpose(1, 2, 0))
    B = A.shape[-1]
    V = np.zeros((n, n, B))
    V[np.arange(n), np.arange(n)] = 1.0

    upper = np.triu_indices(n, 1)
    threshold = tol * np.sqrt(np.sum(A * A, axis=(0, 1)))
    active = _off_norm(A, upper) > threshold
    rounds = _round_robin(n) if n > 1 else ()
    sweeps = 0
    while active.any():
        if sweeps == max_sweeps:
            raise NoConvergence(
                f"{int(active.sum())} matrices not converged after {max_sweeps} sweeps"
            )
        sweeps += 1
        for P, Q in rounds:
            app = A[P, P]
            aqq = A[Q, Q]
            apq = A[P, Q]
            rotate_mask = active[None, :] & (apq != 0.0)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                theta = (aqq - app) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[~rotate_mask] = 0.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            Ap, Aq = A[:, P], A[:, Q]
            A[:, P] = c * Ap - s * Aq
            A[:, Q] = s * Ap + c * Aq
            cr, sr = c[:, None], s[:, None]
            Ap, Aq = A[P], A[Q]
            A[P] = cr * Ap - sr * Aq
            A[Q] = sr * Ap + cr * Aq
            A[P, P] = app - t * apq
            A[Q, Q] = aqq + t * apq
            off = np.where(rotate_mask, 0.0, apq)
            A[P, Q] = off
            A[Q, P] = off
            Vp, Vq = V[:, P], V[:, Q]
            V[:, P] = c * Vp - s * Vq
            V[:, Q] = s * Vp + c * Vq
        active = _off_norm(A, upper) > threshold

    evals = A[np.arange(n), np.arange(n)].T
    V = V.transpose(2, 0, 1)
    order = np.argsort(evals, axis=-1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    return evals.reshape(batch_shape + (n,)), V.reshape(batch_shape + (n, n))


# ---------------------------------------------------------------------------
# batched pipeline core
# ---------------------------------------------------------------------------


def _first_error(code: np.ndarray, failed: np.ndarray, exc) -> np.ndarray:
    return np.where((code == OK) & failed, _CODE[exc], code)


def _fiedler_from_spectrum(evals, evecs, degeneracy_tol):
    """Fiedler vector, eigenvalue, gap and an error code for each spectrum."""
    gap = np.minimum(evals[..., 1] - evals[..., 0], evals[..., 2] - evals[..., 1])
    code = np.where(gap < degeneracy_tol, _CODE[DegenerateSpectrum], OK)
    phi = evecs[..., :, 1].copy()
    mag = np.abs(phi)
    top2 = -np.sort(-mag, axis=-1)[..., :2]
    code = _first_error(code, top2[..., 0] - top2[..., 1] <= TIE_TOL, SignAmbiguous)
    lead = np.take_along_axis(phi, np.argmax(mag, axis=-1)[..., None], axis=-1)
    phi = phi * np.where(lead < 0, -1.0, 1.0)
    return phi, evals[..., 1], gap, code


def _rotations_to_z(m: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(m * m, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        d = m / norm[..., None]
    cos = d[..., 2]
    zero = np.zeros_like(cos)
    vx = np.stack(
        [
            np.stack([zero, zero, -d[..., 0]], axis=-1),
            np.stack([zero, zero, -d[..., 1]], axis=-1),
            np.stack([d[..., 0], d[..., 1], zero], axis=-1),
        ],
        axis=-2,
    )
    vx2 = np.sum(vx[..., :, :, None] * vx[..., None, :, :], axis=-2)
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.eye(3) + vx + vx2 / (1.0 + cos)[..., None, None]
    flip = (1.0 + cos) < 1e-12
    R[flip] = np.diag([1.0, -1.0, -1.0])
    return R


def _rotations_about_z(points: np.ndarray) -> np.ndarray:
    """Rotation about z taking each point into the half-plane ``y = 0, x > 0``."""
    x, y = points[..., 0], points[..., 1]
    rho = np.hypot(x, y)
    with np.errstate(invalid="ignore", divide="ignore"):
        c, s = x / rho, -y / rho
    zero, one = np.zeros_like(c), np.ones_like(c)
    return np.stack(
        [
            np.stack([c, -s, zero], axis=-1),
            np.stack([s, c, zero], axis=-1),
            np.stack([zero, zero, one], axis=-1),
        ],
        axis=-2,
    )


@dataclass
class BatchCanonical:
    """Canonicalization results for a stack of patches.

    ``codes[i]`` is 0 on success, otherwise ``1 + index`` into
    :data:`canonnet.errors.CANON_ERRORS`; failed rows are NaN / -1.
    """

    points: np.ndarray
    permutation: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    centroid_norm: np.ndarray
    anchor: np.ndarray
    eigenvalues: np.ndarray
    spectral_gap: np.ndarray
    codes: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.codes == OK

    def error_names(self) -> list[str | None]:
        return [None if c == OK else CANON_ERRORS[c - 1].code for c in self.codes]

    def patch(self, i: int) -> CanonicalPatch:
        code = int(self.codes[i])
        if code != OK:
            exc = CANON_ERRORS[code - 1]
            raise exc(f"patch {i}: {_REASON[exc]} (spectral gap {self.spectral_gap[i]:.3g})")
        return CanonicalPatch(
            canonical_points=self.points[i],
            permutation=self.permutation[i],
            r1=self.r1[i],
            r2=self.r2[i],
            centroid_norm=float(self.centroid_norm[i]),
            anchor=self.anchor[i],
            eigenvalues=self.eigenvalues[i],
        )


def _canonicalize_core(X: np.ndarray, cfg: CanonConfig) -> BatchCanonical:
    B, n, _ = X.shape
    code = np.zeros(B, dtype=np.int64)

    if cfg.anchor == "nearest":
        centroid = X.mean(axis=1, keepdims=True)
        dc = np.sum((X - centroid) ** 2, axis=-1)
        anchor = np.take_along_axis(X, np.argmin(dc, axis=1)[:, None, None], axis=1)[:, 0]
    else:
        anchor = np.zeros((B, 3))
    Xc = X - anchor[:, None, :]

    D2 = pairwise_sq_dists(Xc)
    D2_off = D2.copy()
    D2_off[:, np.arange(n), np.arange(n)] = np.inf
    code = _first_error(code, D2_off.min(axis=(1, 2)) < DUPLICATE_TOL**2, DegenerateInput)

    W = _heat_kernel(D2, cfg.t, cfg.self_loops)
    if cfg.laplacian == "normalized":
        L = _normalized(W)
    else:
        L = _unnormalized(W)
    L[code != OK] = np.eye(n) * np.arange(n)  # placeholder with a clean spectrum
    evals, evecs = jacobi_eigensolve(L, cfg.jacobi_tol, cfg.max_sweeps)

    phi, _, gap, fcode = _fiedler_from_spectrum(evals, evecs, cfg.degeneracy_tol)
    code = np.where(code == OK, fcode, code)

    perm = np.argsort(phi, axis=1, kind="stable")
    phi_sorted = np.take_along_axis(phi, perm, axis=1)
    code = _first_error(code, np.diff(phi_sorted, axis=1).min(axis=1) <= TIE_TOL, TiedEmbedding)
    reordered = np.take_along_axis(Xc, perm[:, :, None], axis=1)

    m = reordered.mean(axis=1)
    m_norm = np.sqrt(np.sum(m * m, axis=-1))
    code = _first_error(code, m_norm < cfg.centroid_tol, DegenerateCentroid)
    R1 = _rotations_to_z(m)
    Y = rotate(reordered, R1)
    landmark = Y[:, -1]
    code = _first_error(code, np.hypot(landmark[:, 0], landmark[:, 1]) < cfg.axis_tol, DegenerateLandmark)
    R2 = _rotations_about_z(landmark)
    P = rotate(Y, R2)

    bad = code != OK
    P[bad] = np.nan
    perm[bad] = -1
    R1[bad] = np.nan
    R2[bad] = np.nan
    evals = evals.copy()
    evals[bad] = np.nan
    return BatchCanonical(P, perm, R1, R2, m_norm, anchor, evals, gap, code)


def canonicalize_batch(
    clouds, config: CanonConfig | None = None, threads: int = 1, chunk_size: int = 2048
) -> BatchCanonical:
    """Canonicalize a stack ``(B, N, 3)`` of patches without raising per patch.

    Chunks run on ``threads`` workers; per-patch results do not depend on the
    chunking, so any thread count gives bit-identical output.
    """
    cfg = config or CanonConfig()
    X = np.asarray(clouds, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != 3 or X.shape[1] < 3:
        raise ValueError(f"expected (B, N>=3, 3) patches, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("point coordinates must be finite")
    if len(X) == 0:
        n = X.shape[1]
        return BatchCanonical(
            np.empty((0, n, 3)), np.empty((0, n), dtype=np.int64), np.empty((0, 3, 3)),
            np.empty((0, 3, 3)), np.empty(0), np.empty((0, 3)), np.empty((0, n)),
            np.empty(0), np.empty(0, dtype=np.int64),
        )
    if threads > 1:
        chunk_size = max(1, min(chunk_size, -(-len(X) // threads)))
    chunks = [X[i : i + chunk_size] for i in range(0, len(X), chunk_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _canonicalize_core(c, cfg), chunks))
    else:
        parts = [_canonicalize_core(c, cfg) for c in chunks]
    if len(parts) == 1:
        return parts[0]
    return BatchCanonical(
        *(np.concatenate([getattr(p, f) for p in parts]) for f in BatchCanonical.__dataclass_fields__)
    )


# ---------------------------------------------------------------------------
# single-patch API
# ---------------------------------------------------------------------------


def fiedler_embedding(L, degeneracy_tol: float = 1e-8, tol: float = 1e-12, max_sweeps: int = 64) -> SpectralEmbedding:
    """Eigenvector of the second-smallest eigenvalue, largest entry made positive."""
    evals, evecs = jacobi_eigensolve(L, tol, max_sweeps)
    if len(evals) < 3:
        raise ValueError("need at least 3 points")
    phi, lam, gap, code = _fiedler_from_spectrum(evals, evecs, degeneracy_tol)
    if code != OK:
        raise CANON_ERRORS[int(code) - 1](
            f"Fiedler vector undefined (spectral gap {float(gap):.3g}, eigenvalue {float(lam):.6g})"
        )
    return SpectralEmbedding(phi, float(lam), float(gap), evals)


def canonical_order(cloud, emb: SpectralEmbedding):
    """Sort points by ascending Fiedler value; returns ``(reordered, perm)``."""
    X = as_cloud(cloud)
    phi = np.asarray(emb.fiedler)
    perm = np.argsort(phi, kind="stable")
    if np.diff(phi[perm]).min() <= TIE_TOL:
        raise TiedEmbedding("two Fiedler entries coincide")
    return X[perm], perm


def canonical_orient(
    reordered, emb: SpectralEmbedding | None = None, centroid_tol: float = 1e-9, axis_tol: float = 1e-9
) -> CanonicalPatch:
    """Rotate an already-ordered patch into the canonical frame.

    The last row is taken as the landmark (largest Fiedler value).
    """
    Y0 = as_cloud(reordered, min_points=3)
    m = Y0.mean(axis=0)
    m_norm = float(np.linalg.norm(m))
    if m_norm < centroid_tol:
        raise DegenerateCentroid("centroid at the origin leaves the first rotation undefined")
    R1 = _rotations_to_z(m[None])[0]
    Y = rotate(Y0, R1)
    if np.hypot(Y[-1, 0], Y[-1, 1]) < axis_tol:
        raise DegenerateLandmark("landmark on the z-axis leaves the second rotation undefined")
    R2 = _rotations_about_z(Y[-1][None])[0]
    P = rotate(Y, R2)
    return CanonicalPatch(P, np.arange(len(P)), R1, R2, m_norm,
                          eigenvalues=None if emb is None else emb.eigenvalues)


def canonicalize(cloud, config: CanonConfig | None = None) -> CanonicalPatch:
    """Full pipeline on one patch; raises the first failing stage's error."""
    X = as_cloud(cloud, min_points=3)
    return canonicalize_batch(X[None], config).patch(0)


def ordering_consistency(cloud, noisy, config: CanonConfig | None = None) -> float:
    """Fraction of canonical positions holding the same original point."""
    X, Y = as_cloud(cloud, 3), as_cloud(noisy, 3)
    if X.shape != Y.shape:
        raise ValueError("clouds must have the same number of points")
    res = canonicalize_batch(np.stack([X, Y]), config)
    for i in range(2):
        res.patch(i)  # raises on failure
    return float(np.mean(res.permutation[0] == res.permutation[1]))
