"""Balanced synthetic patches sampled from quadratic height fields.

Every sample carries exact labels: the surface class and the Gaussian and
absolute mean curvature at the origin of its Monge patch.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptRecord, FormatVersionMismatch, RejectionLimit
from .geometry import (
    DEFAULT_EPS,
    QuadraticSurface,
    SurfaceClass,
    add_noise,
    classify_surface,
    monge_curvature,
    sample_surface_points,
)

MAX_DRAWS = 100_000

DATASET_MAGIC = b"CNN1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_RECORD_HEAD = struct.Struct("<B5dddQ")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class Sample:
    cloud: np.ndarray
    surface: QuadraticSurface
    label: SurfaceClass
    k_gt: float
    h_abs_gt: float
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.surface == other.surface
            and self.label == other.label
            and self.k_gt == other.k_gt
            and self.h_abs_gt == other.h_abs_gt
            and self.seed == other.seed
            and np.array_equal(self.cloud, other.cloud)
        )


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate.

    ``noise_levels`` lists the noise magnitudes (fractions of the patch
    radius) a sample may receive; each sample draws one uniformly.
    """

    samples_per_class: int = 1000
    patch_size: int = 20
    coefficient_range: tuple[float, float] = (-1.0, 1.0)
    noise_levels: tuple[float, ...] = (0.0, 0.01, 0.03)
    seed: int = 0
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        lo, hi = self.coefficient_range
        if not lo < hi:
            raise ValueError("coefficient_range must be an increasing interval")
        if self.samples_per_class < 0 or self.patch_size < 3:
            raise ValueError("need samples_per_class >= 0 and patch_size >= 3")
        if not self.noise_levels or min(self.noise_levels) < 0:
            raise ValueError("noise levels must be non-negative")
        object.__setattr__(self, "coefficient_range", (float(lo), float(hi)))
        object.__setattr__(self, "noise_levels", tuple(float(v) for v in self.noise_levels))


def sample_seed(seed: int, index: int) -> int:
    """Independent 64-bit stream seed for sample ``index`` of a dataset."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def sample_surface_of_class(
    target: SurfaceClass,
    rng: np.random.Generator,
    coefficient_range: tuple[float, float] = (-1.0, 1.0),
    eps: float = DEFAULT_EPS,
    max_draws: int = MAX_DRAWS,
) -> QuadraticSurface:
    """Random surface whose origin curvature falls in class ``target``.

    Planes are built directly (a = b = c = 0).  Valleys draw ``a, b`` of one
    sign and set ``c = +-2 sqrt(ab)`` so that ``4ab - c^2`` vanishes; the
    other classes use plain rejection sampling of all five coefficients.
    """
    target = SurfaceClass(target)
    lo, hi = coefficient_range
    if target is SurfaceClass.PLANE:
        d, e = rng.uniform(lo, hi, 2)
        return QuadraticSurface(0.0, 0.0, 0.0, float(d), float(e))
    for _ in range(max_draws):
        a, b, c, d, e = rng.uniform(lo, hi, 5)
        if target is SurfaceClass.VALLEY:
            if a * b <= 0:
                continue
            c = (1.0 if rng.random() < 0.5 else -1.0) * 2.0 * np.sqrt(a * b)
        surface = QuadraticSurface(float(a), float(b), float(c), float(d), float(e))
        if classify_surface(monge_curvature(surface), eps) is target:
            return surface
    raise RejectionLimit(f"no {target.name} surface after {max_draws} draws in range {coefficient_range}")


def make_sample(spec: DatasetSpec, index: int) -> Sample:
    seed = sample_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    target = SurfaceClass(index % len(SurfaceClass))
    surface = sample_surface_of_class(target, rng, spec.coefficient_range, spec.eps)
    cloud = sample_surface_points(surface, spec.patch_size, rng)
    level = spec.noise_levels[rng.integers(len(spec.noise_levels))] if len(spec.noise_levels) > 1 else spec.noise_levels[0]
    cloud = add_noise(cloud, level, rng)
    k = monge_curvature(surface)
    return Sample(cloud, surface, target, k.gaussian, k.mean_abs, seed)


def generate_dataset(spec: DatasetSpec, threads: int = 1) -> list[Sample]:
    """``samples_per_class`` samples of every class, interleaved by class.

    Sample ``i`` depends only on ``(spec, i)``, so the output is the same for
    any thread count.
    """
    indices = range(spec.samples_per_class * len(SurfaceClass))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda i: make_sample(spec, i), indices, chunksize=256))
    return [make_sample(spec, i) for i in indices]


def to_arrays(samples: list[Sample], patch_size: int | None = None):
    """Stack samples into ``(points, labels, k_gt, h_abs_gt)`` arrays."""
    if not samples:
        n = patch_size or 0
        return np.empty((0, n, 3)), np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
    points = np.stack([s.cloud for s in samples])
    labels = np.array([int(s.label) for s in samples], dtype=np.int64)
    k = np.array([s.k_gt for s in samples])
    h = np.array([s.h_abs_gt for s in samples])
    return points, labels, k, h


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def _encode(sample: Sample, patch_size: int) -> bytes:
    cloud = np.ascontiguousarray(sample.cloud, dtype="<f8")
    if cloud.shape != (patch_size, 3):
        raise ValueError(f"sample cloud has shape {cloud.shape}, expected ({patch_size}, 3)")
    body = _RECORD_HEAD.pack(
        int(sample.label), *sample.surface.coefficients, sample.k_gt, sample.h_abs_gt, sample.seed
    ) + cloud.tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def write_dataset(path, samples: list[Sample], patch_size: int | None = None) -> None:
    """Write ``samples`` as a little-endian ``CNN1`` file (one CRC32 per record)."""
    if patch_size is None:
        patch_size = len(samples[0].cloud) if samples else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, patch_size, len(samples)))
        for s in samples:
            fh.write(_encode(s, patch_size))


def read_dataset(path) -> list[Sample]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptRecord("file shorter than its header")
    magic, version, patch_size, count = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatVersionMismatch(f"not a dataset file (magic {magic!r})")
    if version != DATASET_VERSION:
        raise FormatVersionMismatch(f"dataset version {version}, expected {DATASET_VERSION}")
    body_size = _RECORD_HEAD.size + patch_size * 3 * 8
    record_size = body_size + _CRC.size
    if len(data) != _HEADER.size + count * record_size:
        raise CorruptRecord(
            f"expected {count} records of {record_size} bytes, file has {len(data) - _HEADER.size} payload bytes"
        )
    samples = []
    offset = _HEADER.size
    for i in range(count):
        body = data[offset : offset + body_size]
        (crc,) = _CRC.unpack_from(data, offset + body_size)
        if zlib.crc32(body) != crc:
            raise CorruptRecord(f"checksum mismatch in record {i}")
        label, a, b, c, d, e, k, h, seed = _RECORD_HEAD.unpack_from(body)
        try:
            label = SurfaceClass(label)
        except ValueError:
            raise CorruptRecord(f"record {i} has unknown class {label}") from None
        cloud = np.frombuffer(body, dtype="<f8", offset=_RECORD_HEAD.size).reshape(patch_size, 3).astype(np.float64)
        samples.append(Sample(cloud, QuadraticSurface(a, b, c, d, e), label, k, h, seed))
        offset += record_size
    return samples


def read_patch_size(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise CorruptRecord("file shorter than its header")
    magic, version, patch_size, _ = _HEADER.unpack(head)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise FormatVersionMismatch("not a version-1 dataset file")
    return patch_size
