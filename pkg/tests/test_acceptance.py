"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line with the measured values to the
"acceptance criteria" section of the terminal summary before asserting.
The heavier criteria train real models and take minutes.
"""

import hashlib
import time

import numpy as np
import pytest

from canonnet.cli import format_points, main
from canonnet.evaluation import (
    ablate_ordering_robustness,
    ablate_pipeline,
    ablation_deltas,
    evaluate,
    fmr_benchmark,
    make_scene,
)
from canonnet.geometry import RigidTransform
from canonnet.model import PARAM_BUDGET, TrainConfig, default_model, train
from canonnet.spectral import canonicalize, canonicalize_batch, jacobi_eigensolve
from canonnet.synthdata import DatasetSpec, generate_dataset

from conftest import ACCEPTANCE_LINES, gradient_relative_error, random_patch

# reference consistency (percent) for the normalized Laplacian at t = 1
REFERENCE_T1 = {0.01: 83.0, 0.03: 63.38, 0.05: 51.05, 0.07: 42.57, 0.10: 34.57}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")


# ---------------------------------------------------------------------------
# shared heavy fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ordering_table():
    start = time.perf_counter()
    rows = ablate_ordering_robustness(n_patches=1000, seed=0)
    return rows, time.perf_counter() - start


@pytest.fixture(scope="module")
def default_trained_model():
    """The default recipe: 10k samples per class, default training noise, TrainConfig()."""
    start = time.perf_counter()
    model = train(generate_dataset(DatasetSpec(samples_per_class=10_000, seed=1)), TrainConfig())
    return model, time.perf_counter() - start


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_01_invariance_suite():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst, mismatched = 0.0, 0
    for _ in range(100):
        P = random_patch(rng)
        ref = canonicalize(P)
        copies, perms = [], []
        for _ in range(10):
            perm = rng.permutation(20)
            for _ in range(10):
                copies.append(RigidTransform.random(rng).apply(P[perm]))
                perms.append(perm)
        res = canonicalize_batch(np.stack(copies), threads=1)
        assert res.ok.all()
        for i, perm in enumerate(perms):
            mismatched += not np.array_equal(perm[res.permutation[i]], ref.permutation)
            worst = max(worst, float(np.abs(res.points[i] - ref.canonical_points).max()))
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and worst <= 1e-6 and elapsed < 30
    record(1, "invariance (100 x 10 x 10)", ok,
           f"ordering mismatches {mismatched}, max coordinate diff {worst:.1e}, {elapsed:.1f} s")
    assert ok


def test_02_zero_noise_consistency(ordering_table):
    rows, _ = ordering_table
    zero = [r for r in rows if r["noise"] == 0.0]
    ok = all(r["consistency"] == 1.0 for r in zero) and all(r["n_patches"] >= 200 for r in zero)
    record(2, "zero-noise ordering consistency", ok,
           f"{len(zero)} cells, min {min(r['consistency'] for r in zero):.4f}, "
           f"min patches/cell {min(r['n_patches'] for r in zero)}")
    assert ok


def test_03_consistency_trend(ordering_table):
    rows, elapsed = ordering_table
    t1 = {r["noise"]: 100 * r["consistency"] for r in rows if r["laplacian"] == "normalized" and r["t"] == 1.0}
    within = all(abs(t1[n] - ref) <= 6.0 for n, ref in REFERENCE_T1.items())
    decreasing = True
    for lap in ("normalized", "unnormalized"):
        for t in sorted({r["t"] for r in rows}):
            series = [100 * r["consistency"] for r in rows if r["laplacian"] == lap and r["t"] == t]
            decreasing &= all(b < a + 1.0 for a, b in zip(series, series[1:]))
    ok = within and decreasing and elapsed < 600
    measured = ", ".join(f"{t1[n]:.1f}/{ref:g}" for n, ref in REFERENCE_T1.items())
    record(3, "consistency vs noise (t=1 normalized, measured/reference)", ok,
           f"{measured}; all rows decreasing: {decreasing}; {elapsed:.0f} s")
    assert ok


def test_04_curvature_errors(default_trained_model):
    model, train_time = default_trained_model
    start = time.perf_counter()
    test_set = generate_dataset(DatasetSpec(samples_per_class=500, noise_levels=(0.0,), seed=77))
    report = evaluate(model, test_set)
    elapsed = train_time + time.perf_counter() - start
    ok = report.n_samples >= 2000 and report.d_k_rmse <= 2.0 and report.d_h_rmse <= 0.3 and elapsed < 1800
    record(4, "curvature errors of the default model", ok,
           f"D_K {report.d_k_rmse:.3f} (<= 2.0), D_H {report.d_h_rmse:.3f} (<= 0.3), "
           f"accuracy {report.accuracy:.3f}, n={report.n_samples}, train+eval {elapsed:.0f} s")
    assert ok


def test_05_ablation_directionality():
    start = time.perf_counter()
    rows = ablate_pipeline()
    d = ablation_deltas(rows)
    ok = d["canonicalization"] >= 3.0 and d["polynomial"] >= 1.0 and abs(d["eigenvalues"]) <= 2.0
    record(5, "ablation deltas over 3 seeds (points)", ok,
           f"canonicalization {d['canonicalization']:+.2f} (>= +3), polynomial {d['polynomial']:+.2f} (>= +1), "
           f"eigenvalues {d['eigenvalues']:+.2f} (within 2); {time.perf_counter() - start:.0f} s")
    assert ok


def test_06_eigensolver_oracle():
    rng = np.random.default_rng(6)
    worst_res, worst_orth = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 33))
        M = rng.normal(size=(n, n))
        A = M + M.T
        w, V = jacobi_eigensolve(A)
        res = np.linalg.norm(A @ V - V * w, axis=0).max() / np.linalg.norm(A)
        worst_res = max(worst_res, float(res))
        worst_orth = max(worst_orth, float(np.abs(V.T @ V - np.eye(n)).max()))
    ok = worst_res <= 1e-9 and worst_orth <= 1e-10
    record(6, "Jacobi eigensolver on 1000 matrices", ok,
           f"max relative residual {worst_res:.1e} (<= 1e-9), max |V^T V - I| {worst_orth:.1e} (<= 1e-10)")
    assert ok


def test_07_gradient_oracle():
    errors = [gradient_relative_error(seed) for seed in range(50)]
    ok = max(errors) < 1e-4
    record(7, "gradient check on 50 cases", ok, f"max relative error {max(errors):.1e} (< 1e-4)")
    assert ok


def test_08_parameter_budget():
    count = default_model().param_count
    ok = count <= PARAM_BUDGET <= 35_000
    record(8, "parameter budget", ok, f"{count} parameters (<= 35000)")
    assert ok


def test_09_scene_fmr(default_trained_model):
    model, _ = default_trained_model
    start = time.perf_counter()
    s = fmr_benchmark(model, n_scenes=50, noise=0.005, seed=9)
    ok = s.identity == 1.0 and s.noisy >= 0.6 and s.unrelated < 0.2
    record(9, "synthetic-scene FMR over 50 scenes", ok,
           f"identity {s.identity:.3f} (= 1), noisy {s.noisy:.3f} (>= 0.6), unrelated {s.unrelated:.3f} (< 0.2); "
           f"{time.perf_counter() - start:.0f} s")
    assert ok


def test_10_cli_thread_determinism(tmp_path, monkeypatch):
    def digests(directory):
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(directory.iterdir()) if p.name != "manifest.json"}

    rng = np.random.default_rng(10)
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    (inputs / "patch.xyz").write_text(format_points(random_patch(rng)))
    (inputs / "scene.xyz").write_text(format_points(make_scene(rng)))

    def run_all(threads: int) -> dict:
        # relative paths inside a per-run working directory, so that the
        # recorded config.ini files do not differ by their location
        root = tmp_path / f"threads{threads}"
        root.mkdir()
        monkeypatch.chdir(root)
        names = ("generate", "train", "eval", "canon", "descriptor", "ablate")
        for name in names:
            (root / name).mkdir()
        (root / "patch.xyz").write_text((inputs / "patch.xyz").read_text())
        (root / "scene.xyz").write_text((inputs / "scene.xyz").read_text())
        t = ("--threads", threads, "--seed", 3)
        data, model = "generate/dataset.cnn", "train/model.cnm"
        commands = [
            ("generate", "--out", "generate", "--samples-per-class", 60, *t),
            ("train", "--out", "train", "--data", data, "--epochs", 2, *t),
            ("eval", "--out", "eval", "--model", model, "--data", data, *t),
            ("canon", "--out", "canon", "--input", "patch.xyz", *t),
            ("descriptor", "--out", "descriptor", "--model", model, "--input", "scene.xyz", "--keypoints", 16, *t),
            ("ablate", "--out", "ablate", "--kind", "all", "--patches", 40, "--pipeline-seeds", 1,
             "--train-per-class", 30, "--test-per-class", 10, "--epochs", 1, "--model", model, "--scenes", 2, *t),
        ]
        codes = [main([str(a) for a in argv]) for argv in commands]
        assert codes == [0] * len(commands)
        return {name: digests(root / name) for name in names}

    one, four = run_all(1), run_all(4)
    differing = [name for name in one if one[name] != four[name]]
    files = sum(len(v) for v in one.values())
    ok = not differing
    record(10, "CLI outputs with --threads 1 vs 4", ok,
           f"{len(one)} subcommands, {files} files compared, differing: {differing or 'none'}")
    assert ok
