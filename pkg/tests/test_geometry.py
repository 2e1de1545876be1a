import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonnet.geometry import (
    CurvaturePair,
    QuadraticSurface,
    RigidTransform,
    SurfaceClass,
    add_noise,
    as_cloud,
    classify_surface,
    monge_curvature,
    patch_radius,
    random_rotation,
    rotate,
    rotation_about_z,
    rotation_to_z,
    sample_surface_points,
)

coef = st.floats(-1, 1, allow_nan=False)


def test_as_cloud_rejects_bad_shapes():
    with pytest.raises(ValueError):
        as_cloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        as_cloud([[0, 0, np.nan]])
    with pytest.raises(ValueError):
        as_cloud(np.zeros((2, 3)), min_points=3)


def test_random_rotation_is_proper(rng):
    for _ in range(20):
        R = random_rotation(rng)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-13)
        assert np.isclose(np.linalg.det(R), 1.0)


def test_rigid_transform_rejects_reflection():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_transform_inverse_and_compose(rng):
    a, b = RigidTransform.random(rng), RigidTransform.random(rng)
    X = rng.normal(size=(10, 3))
    assert np.allclose(a.inverse().apply(a.apply(X)), X, atol=1e-12)
    assert np.allclose(a.compose(b).apply(X), a.apply(b.apply(X)), atol=1e-12)
    assert np.allclose(RigidTransform.identity().apply(X), X)


def test_rotate_matches_matmul(rng):
    X = rng.normal(size=(5, 7, 3))
    R = np.stack([random_rotation(rng) for _ in range(5)])
    assert np.allclose(rotate(X, R), np.einsum("bij,bnj->bni", R, X))


def test_rotation_to_z(rng):
    for _ in range(20):
        d = rng.normal(size=3)
        R = rotation_to_z(d)
        assert np.allclose(R @ (d / np.linalg.norm(d)), [0, 0, 1], atol=1e-12)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.allclose(rotation_to_z([0, 0, -2.0]) @ [0, 0, -1.0], [0, 0, 1])
    assert np.allclose(rotation_to_z([0, 0, 3.0]), np.eye(3))


def test_rotation_about_z():
    assert np.allclose(rotation_about_z(np.pi / 2) @ [1, 0, 0], [0, 1, 0])


def test_curvature_of_paraboloid():
    # z = x^2 + y^2: principal curvatures 2, 2 at the apex
    k = monge_curvature(QuadraticSurface(1, 1, 0, 0, 0))
    assert k.gaussian == pytest.approx(4.0)
    assert k.mean == pytest.approx(2.0)


def test_curvature_of_saddle_and_cylinder():
    k = monge_curvature(QuadraticSurface(1, -1, 0, 0, 0))
    assert k.gaussian == pytest.approx(-4.0) and k.mean == pytest.approx(0.0)
    k = monge_curvature(QuadraticSurface(0.5, 0, 0, 0, 0))
    assert k.gaussian == 0.0 and k.mean == pytest.approx(0.5)


def test_curvature_with_tilt_matches_sphere_formula():
    # tilted plane has no curvature whatever the slope
    k = monge_curvature(QuadraticSurface(0, 0, 0, 0.7, -0.3))
    assert k == CurvaturePair(0.0, 0.0, 0.0)


@given(coef, coef, coef)
def test_gaussian_curvature_at_origin_closed_form(a, b, c):
    k = monge_curvature(QuadraticSurface(a, b, c, 0, 0))
    assert k.gaussian == pytest.approx(4 * a * b - c * c, abs=1e-12)
    assert k.mean == pytest.approx(a + b, abs=1e-12)


@given(coef, coef, coef, coef, coef, st.floats(0, 2 * np.pi))
@settings(max_examples=50)
def test_curvature_invariant_under_rotation_about_z(a, b, c, d, e, theta):
    # rotating the (x, y) frame of the height field leaves K and H unchanged
    co, si = np.cos(theta), np.sin(theta)
    # substitute x = co u - si v, y = si u + co v
    a2 = a * co * co + b * si * si + c * co * si
    b2 = a * si * si + b * co * co - c * co * si
    c2 = -2 * a * co * si + 2 * b * co * si + c * (co * co - si * si)
    d2, e2 = d * co + e * si, -d * si + e * co
    k1 = monge_curvature(QuadraticSurface(a, b, c, d, e))
    k2 = monge_curvature(QuadraticSurface(a2, b2, c2, d2, e2))
    assert k2.gaussian == pytest.approx(k1.gaussian, abs=1e-9)
    assert k2.mean == pytest.approx(k1.mean, abs=1e-9)


def test_classify():
    assert classify_surface(CurvaturePair(0, 0, 0)) is SurfaceClass.PLANE
    assert classify_surface(CurvaturePair(1, 1, 1)) is SurfaceClass.PARABOLIC
    assert classify_surface(CurvaturePair(-1, 0, 0)) is SurfaceClass.SADDLE
    assert classify_surface(CurvaturePair(0, -0.5, 0.5)) is SurfaceClass.VALLEY
    assert classify_surface(CurvaturePair(1e-7, 1e-7, 1e-7)) is SurfaceClass.PLANE
    with pytest.raises(ValueError):
        classify_surface(CurvaturePair(0, 0, 0), eps=0)


def test_sample_surface_points_in_domain(rng):
    s = QuadraticSurface(0.3, -0.2, 0.1, 0.5, 0.0)
    P = sample_surface_points(s, 50, rng)
    assert P.shape == (50, 3)
    assert np.all(np.abs(P[:, :2]) <= 0.5)
    assert np.allclose(P[:, 2], s.height(P[:, 0], P[:, 1]))


def test_noise_scales_with_patch_radius(rng):
    P = rng.normal(size=(2000, 3))
    assert np.array_equal(add_noise(P, 0.0, rng), P)
    for scale in (1.0, 10.0):
        Q = add_noise(P * scale, 0.05, np.random.default_rng(0))
        assert np.std(Q - P * scale) == pytest.approx(0.05 * patch_radius(P * scale), rel=0.05)


def test_noise_batched_matches_single():
    P = np.random.default_rng(1).normal(size=(3, 10, 3))
    a = add_noise(P, 0.1, np.random.default_rng(7))
    r = np.random.default_rng(7).standard_normal(P.shape)
    assert np.allclose(a, P + r * (0.1 * patch_radius(P))[:, None, None])
