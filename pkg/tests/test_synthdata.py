import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonnet.errors import CorruptRecord, FormatVersionMismatch, RejectionLimit
from canonnet.geometry import QuadraticSurface, SurfaceClass, classify_surface, monge_curvature
from canonnet.synthdata import (
    DatasetSpec,
    generate_dataset,
    make_sample,
    read_dataset,
    read_patch_size,
    sample_seed,
    sample_surface_of_class,
    to_arrays,
    write_dataset,
)


def test_plane_is_exactly_flat(rng):
    s = sample_surface_of_class(SurfaceClass.PLANE, rng)
    k = monge_curvature(s)
    assert k.gaussian == 0.0 and k.mean == 0.0


def test_saddle_sign(rng):
    for _ in range(50):
        s = sample_surface_of_class(SurfaceClass.SADDLE, rng)
        assert 4 * s.a * s.b - s.c**2 < 0


@pytest.mark.parametrize("cls", list(SurfaceClass))
def test_thousand_draws_reclassify(cls):
    rng = np.random.default_rng(int(cls))
    for _ in range(1000):
        s = sample_surface_of_class(cls, rng)
        assert classify_surface(monge_curvature(s)) is cls
        assert all(-1 <= v <= 1 for v in (s.a, s.b, s.d, s.e))


def test_rejection_limit(rng):
    # with every coefficient in [0.5, 1], 4ab >= 1 >= c^2, so no saddle exists
    with pytest.raises(RejectionLimit):
        sample_surface_of_class(SurfaceClass.SADDLE, rng, (0.5, 1.0), max_draws=200)
    sample_surface_of_class(SurfaceClass.PLANE, rng, (0.5, 1.0), max_draws=1)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(coefficient_range=(1, -1))
    with pytest.raises(ValueError):
        DatasetSpec(noise_levels=(-0.1,))
    with pytest.raises(ValueError):
        DatasetSpec(patch_size=2)


def test_balance_and_labels():
    samples = generate_dataset(DatasetSpec(samples_per_class=100, seed=3))
    labels = [s.label for s in samples]
    assert len(samples) == 400
    for c in SurfaceClass:
        assert labels.count(c) == 100
    for s in samples:
        k = monge_curvature(s.surface)
        assert s.label is classify_surface(k)
        assert (s.k_gt, s.h_abs_gt) == (k.gaussian, k.mean_abs)
        assert s.cloud.shape == (20, 3)


def test_clean_points_in_domain():
    for s in generate_dataset(DatasetSpec(samples_per_class=25, noise_levels=(0.0,), seed=1)):
        assert np.all(np.abs(s.cloud[:, :2]) <= 0.5)
        assert np.allclose(s.cloud[:, 2], s.surface.height(s.cloud[:, 0], s.cloud[:, 1]))


def test_least_squares_label_oracle():
    samples = generate_dataset(DatasetSpec(samples_per_class=250, noise_levels=(0.0,), seed=11))
    agree = 0
    for s in samples:
        x, y, z = s.cloud.T
        A = np.column_stack([x * x, y * y, x * y, x, y, np.ones_like(x)])
        a, b, c, d, e, _ = np.linalg.lstsq(A, z, rcond=None)[0]
        fitted = classify_surface(monge_curvature(QuadraticSurface(a, b, c, d, e)), eps=1e-3)
        agree += fitted is s.label
    assert agree / len(samples) >= 0.99


def test_generation_deterministic_and_thread_independent(tmp_path):
    spec = DatasetSpec(samples_per_class=30, seed=7)
    a, b = generate_dataset(spec), generate_dataset(spec, threads=3)
    assert a == b
    write_dataset(tmp_path / "a.cnn", a)
    write_dataset(tmp_path / "b.cnn", b)
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(tmp_path / "a.cnn") == digest(tmp_path / "b.cnn")


def test_sample_depends_only_on_seed_and_index():
    spec = DatasetSpec(samples_per_class=10, seed=5)
    assert make_sample(spec, 17) == generate_dataset(spec)[17]
    assert sample_seed(5, 17) != sample_seed(5, 18)
    assert sample_seed(5, 17) != sample_seed(6, 17)


def test_noise_levels_are_used():
    spec = DatasetSpec(samples_per_class=50, noise_levels=(0.0, 0.05), seed=2)
    noisy = 0
    for s in generate_dataset(spec):
        resid = s.cloud[:, 2] - s.surface.height(s.cloud[:, 0], s.cloud[:, 1])
        noisy += np.abs(resid).max() > 1e-12
    assert 50 < noisy < 150


def test_round_trip(tmp_path):
    samples = generate_dataset(DatasetSpec(samples_per_class=5, seed=9))
    write_dataset(tmp_path / "d.cnn", samples)
    back = read_dataset(tmp_path / "d.cnn")
    assert back == samples
    assert read_patch_size(tmp_path / "d.cnn") == 20


def test_empty_dataset(tmp_path):
    write_dataset(tmp_path / "e.cnn", [], patch_size=20)
    assert read_dataset(tmp_path / "e.cnn") == []
    P, l, k, h = to_arrays([], 20)
    assert P.shape == (0, 20, 3) and l.shape == (0,)


def test_truncated_file(tmp_path):
    samples = generate_dataset(DatasetSpec(samples_per_class=2, seed=1))
    path = tmp_path / "d.cnn"
    write_dataset(path, samples)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CorruptRecord):
        read_dataset(path)


def test_flipped_byte_fails_checksum(tmp_path):
    samples = generate_dataset(DatasetSpec(samples_per_class=2, seed=1))
    path = tmp_path / "d.cnn"
    write_dataset(path, samples)
    data = bytearray(path.read_bytes())
    data[100] ^= 0x40
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptRecord):
        read_dataset(path)


def test_wrong_magic_or_version(tmp_path):
    path = tmp_path / "d.cnn"
    write_dataset(path, [], patch_size=20)
    data = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(FormatVersionMismatch):
        read_dataset(path)
    data[4] = 2
    path.write_bytes(bytes(data))
    with pytest.raises(FormatVersionMismatch):
        read_dataset(path)


@given(st.integers(0, 2**32), st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_label_consistency_property(seed, cls):
    s = sample_surface_of_class(SurfaceClass(cls), np.random.default_rng(seed))
    assert classify_surface(monge_curvature(s)) is SurfaceClass(cls)
