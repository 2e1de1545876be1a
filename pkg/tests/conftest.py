import numpy as np
import pytest

from canonnet.geometry import QuadraticSurface, sample_surface_points
from canonnet.model import FeatureConfig, MlpModel, loss_and_grad

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_patch(rng, n=20):
    """A generic patch: random quadratic, uniform samples."""
    s = QuadraticSurface(*rng.uniform(-1, 1, 5))
    return sample_surface_points(s, n, rng)


@pytest.fixture
def patch(rng):
    return random_patch(rng)


def tiny_model(seed=0):
    """Input 12 (two points x six features), one hidden layer of 8."""
    fc = FeatureConfig(patch_size=2)
    m = MlpModel.init(fc, hidden=(8,), seed=seed)
    rng = np.random.default_rng(seed + 100)
    m.input_mean = rng.normal(size=12) * 0.1
    m.input_scale = rng.uniform(0.5, 2.0, 12)
    for n in m.param_names:
        m.params[n] = m.params[n] + rng.normal(scale=0.1, size=m.params[n].shape)
    return m


def numeric_grad(model, X, labels, k, h, eps=1e-5):
    grads = {}
    for n in model.param_names:
        p = model.params[n]
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss_and_grad(model, X, labels, k, h)[0]
            p[idx] = old - eps
            down = loss_and_grad(model, X, labels, k, h)[0]
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads[n] = g
    return grads


def gradient_relative_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    X = rng.normal(size=(1, 12))
    labels = rng.integers(0, 4, 1)
    k, h = rng.normal(size=1) * 2, np.abs(rng.normal(size=1))
    _, analytic = loss_and_grad(m, X, labels, k, h)
    numeric = numeric_grad(m, X, labels, k, h)
    a = np.concatenate([analytic[n].ravel() for n in m.param_names])
    b = np.concatenate([numeric[n].ravel() for n in m.param_names])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
