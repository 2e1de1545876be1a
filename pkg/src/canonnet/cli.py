"""Command-line entry point: ``canonnet <command> [options]``.

Every option can also come from a ``key = value`` file passed with
``--config``; flags override the file, the file overrides built-in
defaults.  Each run writes the fully resolved configuration to
``<out>/config.ini`` (re-running with it reproduces the outputs) and a
``manifest.json`` holding run metadata such as the thread count and a
timestamp, the only files allowed to differ between identical runs.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    CanonicalizationError,
    CorruptRecord,
    Diverged,
    FormatVersionMismatch,
    NoConvergence,
    NoCorrespondences,
    RejectionLimit,
    ShapeMismatch,
)
from .evaluation import (
    ORDERING_COLUMNS,
    PIPELINE_COLUMNS,
    PipelineAblation,
    SceneSpec,
    ablate_ordering_robustness,
    ablate_pipeline,
    ablation_deltas,
    describe_patches,
    evaluate,
    extract_patches,
    farthest_point_sampling,
    fmr_benchmark,
    write_csv,
)
from .geometry import SurfaceClass
from .model import FeatureConfig, TrainConfig, load_model, prepare_features, save_model, train_arrays
from .spectral import CanonConfig, canonicalize
from .synthdata import DatasetSpec, generate_dataset, read_dataset, to_arrays, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SECTION = "canonnet"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# option table
# ---------------------------------------------------------------------------


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, tuple):
        return text
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, tuple):
        return text
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str
    choices: tuple | None = None


SEED = Opt("seed", int, 0, "master seed")
# accepted everywhere for a uniform interface; these commands draw no random numbers
INERT_SEED = Opt("seed", int, 0, "accepted for uniformity; unused")
CANON_OPTS = [
    Opt("t", float, 1.0, "heat-kernel temperature"),
    Opt("laplacian", str, "normalized", "Laplacian kind", ("normalized", "unnormalized")),
    Opt("anchor", str, "nearest", "translation anchor", ("nearest", "origin")),
    Opt("self_loops", _bool, False, "keep the unit diagonal in the heat-kernel graph"),
]

COMMANDS: dict[str, list[Opt]] = {
    "generate": [
        SEED,
        Opt("samples_per_class", int, 1000, "samples of each surface class"),
        Opt("patch_size", int, 20, "points per patch"),
        Opt("noise_levels", _floats, (0.0, 0.01, 0.03), "noise levels (fractions of patch radius) drawn per sample"),
        Opt("coefficient_min", float, -1.0, "lower bound of surface coefficients"),
        Opt("coefficient_max", float, 1.0, "upper bound of surface coefficients"),
        Opt("eps", float, 1e-6, "curvature classification tolerance"),
    ],
    "train": [
        SEED,
        Opt("data", str, None, "training dataset file"),
        Opt("resume", str, "", "checkpoint to continue training from"),
        Opt("epochs", int, 200, "epochs to run"),
        Opt("batch_size", int, 128, "minibatch size"),
        Opt("learning_rate", float, 1e-3, "optimizer step size"),
        Opt("optimizer", str, "adam", "optimizer", ("adam", "sgd")),
        Opt("w_cls", float, 0.5, "classification loss weight"),
        Opt("w_reg", float, 0.5, "regression loss weight"),
        Opt("hidden", _ints, (128, 64), "hidden layer widths"),
        Opt("canonicalize", _bool, True, "canonicalize patches before featurizing"),
        Opt("polynomial", _bool, True, "append x^2, y^2, xy per point"),
        Opt("eigenvalues", int, 0, "smallest nonzero Laplacian eigenvalues appended as features"),
        *CANON_OPTS,
    ],
    "eval": [
        INERT_SEED,
        Opt("model", str, None, "checkpoint file"),
        Opt("data", str, None, "dataset file"),
    ],
    "canon": [
        INERT_SEED,
        Opt("input", str, "-", "text file of 'x y z' lines ('-' for stdin)"),
        *CANON_OPTS,
    ],
    "descriptor": [
        INERT_SEED,
        Opt("model", str, None, "checkpoint file"),
        Opt("input", str, "-", "text file of 'x y z' lines ('-' for stdin)"),
        Opt("resolutions", _ints, (100, 50, 20), "neighbourhood sizes, coarse to fine"),
        Opt("keypoints", int, 64, "keypoints chosen by farthest-point sampling"),
    ],
    "ablate": [
        SEED,
        Opt("kind", str, "all", "which sweep to run", ("ordering", "pipeline", "fmr", "all")),
        Opt("patches", int, 200, "patches per ordering cell"),
        Opt("temperatures", _floats, (0.5, 1.0, 2.0, 5.0), "ordering sweep temperatures"),
        Opt("laplacians", str, "normalized, unnormalized", "ordering sweep Laplacian kinds"),
        Opt("ordering_noise", _floats, (0.0, 0.01, 0.03, 0.05, 0.07, 0.10), "ordering sweep noise levels"),
        Opt("pipeline_noise", _floats, (0.0, 0.01, 0.03, 0.05), "pipeline sweep test noise levels"),
        Opt("pipeline_seeds", int, 3, "seeds per pipeline configuration"),
        Opt("train_per_class", int, 5000, "pipeline sweep training samples per class"),
        Opt("test_per_class", int, 500, "pipeline sweep test samples per class"),
        Opt("epochs", int, 60, "pipeline sweep training epochs"),
        Opt("model", str, "", "checkpoint for the FMR sweep"),
        Opt("scenes", int, 50, "FMR scenes"),
        Opt("fmr_noise", float, 0.005, "FMR noise, fraction of the scene radius"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonnet", description="Spectral patch canonicalization toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--out", default=None, help="output directory (must exist)")
        for o in opts:
            p.add_argument(
                "--" + o.name.replace("_", "-"),
                dest=o.name,
                default=None,
                help=f"{o.help} (default: {_fmt(o.default) if o.default is not None else 'required'})",
            )
    return parser


def read_config_file(path) -> dict[str, str]:
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if not text.lstrip().startswith("["):
            text = f"[{SECTION}]\n" + text
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    out = {}
    for section in cp.sections():
        out.update(cp[section])
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in rising priority) and convert types."""
    opts = {o.name: o for o in COMMANDS[command]}
    raw = {name: o.default for name, o in opts.items()}
    if args.config:
        try:
            file_values = read_config_file(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        file_command = file_values.pop("command", command)
        if file_command != command:
            raise ConfigError(f"config file is for '{file_command}', not '{command}'")
        unknown = sorted(set(file_values) - set(opts))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        raw.update(file_values)
    for name in opts:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    resolved = {}
    for name, o in opts.items():
        value = raw[name]
        if value is None:
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")
        try:
            value = o.type(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}: {exc}") from None
        if o.choices and value not in o.choices:
            raise ConfigError(f"{name} must be one of {', '.join(o.choices)}")
        resolved[name] = value
    return resolved


def config_text(command: str, cfg: dict) -> str:
    lines = [f"[{SECTION}]", f"command = {command}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _canon_config(cfg: dict) -> CanonConfig:
    try:
        return CanonConfig(t=cfg["t"], laplacian=cfg["laplacian"], anchor=cfg["anchor"], self_loops=cfg["self_loops"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _finish(out: Path, command: str, cfg: dict, threads: int, extra: dict | None = None) -> None:
    text = config_text(command, cfg)
    (out / "config.ini").write_text(text)
    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "threads": threads,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    manifest.update(extra or {})
    _write_json(out / "manifest.json", manifest)


def read_points(source: str) -> np.ndarray:
    """Parse one ``x y z`` triple per line; blank lines and ``#`` comments are skipped."""
    text = sys.stdin.read() if source == "-" else Path(source).read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 coordinates, got {len(parts)}")
        rows.append([float(p) for p in parts])
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("coordinates must be finite")
    return pts


def format_points(points: np.ndarray) -> str:
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in points.tolist())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict, out: Path, threads: int) -> int:
    try:
        spec = DatasetSpec(
            samples_per_class=cfg["samples_per_class"],
            patch_size=cfg["patch_size"],
            coefficient_range=(cfg["coefficient_min"], cfg["coefficient_max"]),
            noise_levels=cfg["noise_levels"],
            seed=cfg["seed"],
            eps=cfg["eps"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    samples = generate_dataset(spec, threads=threads)
    write_dataset(out / "dataset.cnn", samples, spec.patch_size)
    counts = {c.name.lower(): 0 for c in SurfaceClass}
    for s in samples:
        counts[s.label.name.lower()] += 1
    spec_text = config_text("generate", cfg)
    _finish(out, "generate", cfg, threads, {
        "samples": len(samples),
        "class_counts": counts,
        "seed": spec.seed,
        "spec_hash": hashlib.sha256(spec_text.encode()).hexdigest(),
        "dataset_sha256": hashlib.sha256((out / "dataset.cnn").read_bytes()).hexdigest(),
    })
    return EXIT_OK


def cmd_train(cfg: dict, out: Path, threads: int) -> int:
    samples = read_dataset(cfg["data"])
    if not samples:
        raise CorruptRecord("dataset is empty")
    points, labels, k, h = to_arrays(samples)
    try:
        tc = TrainConfig(
            learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
            w_cls=cfg["w_cls"], w_reg=cfg["w_reg"], optimizer=cfg["optimizer"], seed=cfg["seed"],
            hidden=cfg["hidden"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model = None
    if cfg["resume"]:
        model = load_model(cfg["resume"], patch_size=points.shape[1])
        fc = model.features
        if tuple(model.hidden) != tc.hidden:
            raise ConfigError(f"checkpoint has hidden layers {model.hidden}, config asks for {tc.hidden}")
    else:
        fc = FeatureConfig(
            patch_size=points.shape[1], polynomial=cfg["polynomial"], canonicalize=cfg["canonicalize"],
            eigenvalues=cfg["eigenvalues"], canon=_canon_config(cfg),
        )
    if model is not None:
        model.loss_curve = _read_prior_curve(Path(cfg["resume"]))
    X, ok = prepare_features(points, fc, threads)
    model = train_arrays(X, labels, k, h, fc, tc, model)
    save_model(model, out / "model.cnm")
    with open(out / "loss.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(model.loss_curve):
            fh.write(f"{i},{value!r}\n")
    steps_per_epoch = -(-int(ok.sum()) // tc.batch_size)
    tail = model.loss_curve[-min(len(model.loss_curve), steps_per_epoch):]
    _finish(out, "train", cfg, threads, {
        "samples": len(points),
        "skipped_patches": int((~ok).sum()),
        "steps": len(model.loss_curve),
        "epochs_completed": int(model.opt_state["epoch"]),
        "final_epoch_mean_loss": float(np.mean(tail)),
        "param_count": model.param_count,
    })
    return EXIT_OK


def _read_prior_curve(checkpoint: Path) -> list[float]:
    """Loss history of a checkpoint, taken from the ``loss.csv`` beside it."""
    path = checkpoint.parent / "loss.csv"
    if not path.exists():
        return []
    return [float(line.rsplit(",", 1)[1]) for line in path.read_text().splitlines()[1:]]


def cmd_eval(cfg: dict, out: Path, threads: int) -> int:
    samples = read_dataset(cfg["data"])
    if not samples:
        raise CorruptRecord("dataset is empty")
    model = load_model(cfg["model"], patch_size=len(samples[0].cloud))
    report = evaluate(model, samples, threads=threads)
    _write_json(out / "eval.json", report.to_dict())
    names = [c.name.lower() for c in SurfaceClass]
    with open(out / "confusion.csv", "w") as fh:
        fh.write("true," + ",".join(names) + ",recall\n")
        for i, row in enumerate(report.confusion):
            total = row.sum()
            recall = float(row[i] / total) if total else float("nan")
            fh.write(f"{names[i]}," + ",".join(str(int(v)) for v in row) + f",{recall!r}\n")
    _finish(out, "eval", cfg, threads, {"samples": report.n_samples})
    return EXIT_OK


def cmd_canon(cfg: dict, out: Path | None, threads: int) -> int:
    points = read_points(cfg["input"])
    try:
        patch = canonicalize(points, _canon_config(cfg))
    except CanonicalizationError as exc:
        _emit(out, "canon.json", {"error": exc.code, "message": str(exc)})
        return EXIT_NUMERIC
    result = {
        "canonical_points": patch.canonical_points.tolist(),
        "permutation": patch.permutation.tolist(),
        "r1": patch.r1.tolist(),
        "r2": patch.r2.tolist(),
        "anchor": patch.anchor.tolist(),
        "centroid_norm": patch.centroid_norm,
    }
    _emit(out, "canon.json", result)
    if out is not None:
        (out / "canonical.xyz").write_text(format_points(patch.canonical_points))
        _finish(out, "canon", cfg, threads, {"points": len(points)})
    return EXIT_OK


def _emit(out: Path | None, name: str, obj) -> None:
    if out is None:
        sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    else:
        _write_json(out / name, obj)


def cmd_descriptor(cfg: dict, out: Path, threads: int) -> int:
    points = read_points(cfg["input"])
    model = load_model(cfg["model"])
    kps = farthest_point_sampling(points, min(cfg["keypoints"], len(points)))
    patches = extract_patches(points, kps, cfg["resolutions"], model.features.patch_size)
    values, missing = describe_patches(model, patches, threads)
    names = [c.name.lower() for c in SurfaceClass] + ["k", "h_abs"]
    header = ["keypoint", "x", "y", "z"] + [f"r{r}_{n}" for r in cfg["resolutions"] for n in names]
    with open(out / "descriptors.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for idx, row in zip(kps, values):
            cells = [str(int(idx))] + [repr(v) for v in points[idx].tolist()] + [repr(v) for v in row.tolist()]
            fh.write(",".join(cells) + "\n")
    _finish(out, "descriptor", cfg, threads, {
        "points": len(points), "keypoints": len(kps), "missing_levels": int(missing.sum()),
    })
    return EXIT_OK


def cmd_ablate(cfg: dict, out: Path, threads: int) -> int:
    kind, summary = cfg["kind"], {}
    if kind in ("ordering", "all"):
        laplacians = tuple(v.strip() for v in cfg["laplacians"].split(",") if v.strip())
        try:
            for lap in laplacians:
                CanonConfig(laplacian=lap)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        rows = ablate_ordering_robustness(
            cfg["temperatures"], laplacians, cfg["ordering_noise"], cfg["patches"], seed=cfg["seed"], threads=threads
        )
        write_csv(out / "ordering.csv", rows, ORDERING_COLUMNS)
        summary["ordering"] = rows
    if kind in ("pipeline", "all"):
        ab = PipelineAblation(
            noise_levels=cfg["pipeline_noise"],
            seeds=tuple(cfg["seed"] + i for i in range(cfg["pipeline_seeds"])),
            train_per_class=cfg["train_per_class"],
            test_per_class=cfg["test_per_class"],
            train=TrainConfig(epochs=cfg["epochs"]),
        )
        rows = ablate_pipeline(ab, threads=threads)
        write_csv(out / "pipeline.csv", rows, PIPELINE_COLUMNS)
        summary["pipeline"] = ablation_deltas(rows)
    if kind in ("fmr", "all"):
        if not cfg["model"]:
            raise ConfigError("the FMR sweep needs --model")
        model = load_model(cfg["model"])
        summary["fmr"] = fmr_benchmark(
            model, cfg["scenes"], cfg["fmr_noise"], seed=cfg["seed"], scene=SceneSpec(), threads=threads
        ).to_dict()
    _write_json(out / "summary.json", summary)
    _finish(out, "ablate", cfg, threads)
    return EXIT_OK


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "canon": cmd_canon,
    "descriptor": cmd_descriptor,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        cfg = resolve(command, args)
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = _out_dir(args)
        if out is None and command != "canon":
            raise ConfigError(f"{command} needs --out")
        return HANDLERS[command](cfg, out, threads)
    except ConfigError as exc:
        print(f"canonnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as exc:
        print(f"canonnet: training diverged: {exc} (last finite loss {exc.last_finite_loss})", file=sys.stderr)
        return EXIT_NUMERIC
    except RejectionLimit as exc:
        print(f"canonnet: generation failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NoConvergence, CanonicalizationError) as exc:
        print(f"canonnet: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatVersionMismatch, CorruptRecord, ShapeMismatch, NoCorrespondences, ValueError, OSError) as exc:
        print(f"canonnet: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
