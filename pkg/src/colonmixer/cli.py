"""Command-line front end: synthesize phantom data, train, evaluate,
stream live estimates, and self-check the numerical core."""

from __future__ import annotations

import argparse
import collections
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    MARKER_COUNT,
    SENSOR_COUNT,
    ColonFrame,
    ColonoscopeFrame,
    NormalizationStats,
    RecordingFormatError,
    build_window_features,
    compute_normalization_stats,
    denormalize,
    extract_patches,
    load_recording,
    make_window_samples,
    reassemble_patches,
    save_recording,
)
from .model import (
    CheckpointError,
    ColonShapeMixer,
    EstimatedColonShape,
    MixerConfig,
    load_checkpoint,
    save_checkpoint,
)
from .nn import check_gradients, mse_loss
from .phantom import PhantomSpec, generate_recording, generate_suite
from .training import (
    COMPARISON_CONSTANTS,
    TrainConfig,
    ZeroVarianceError,
    collect_samples,
    med,
    paired_t_test,
    run_loocv,
    train,
)


class CliError(ValueError):
    """A contract violation at the command-line level."""


class ConfigFileError(CliError):
    """A malformed or unknown entry in a settings file."""


# -- settings files ----------------------------------------------------------

_MODEL_DEFAULTS = {f.name: f.default for f in dataclasses.fields(MixerConfig)}
_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, text: str, default, where: str):
    low = text.lower()
    try:
        if key == "head_dims":
            return tuple(int(p.strip()) for p in text.split(","))
        if key == "stop_loss":
            return None if low == "none" else float(text)
        if isinstance(default, bool):
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigFileError(f"{where}: invalid value for '{key}': {text!r}") from None


def parse_config_file(path: str | Path) -> tuple[dict, dict]:
    """Read a flat `key = value` settings file into model and training
    keyword dicts. Keys are the exact config field names; anything else,
    and any duplicate, is an error naming the line."""
    path = Path(path)
    if not path.is_file():
        raise CliError(f"settings file {path} does not exist")
    model_kv: dict = {}
    train_kv: dict = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigFileError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in model_kv or key in train_kv:
            raise ConfigFileError(f"{where}: duplicate key '{key}'")
        if key in _MODEL_DEFAULTS:
            model_kv[key] = _parse_value(key, value, _MODEL_DEFAULTS[key], where)
        elif key in _TRAIN_DEFAULTS:
            train_kv[key] = _parse_value(key, value, _TRAIN_DEFAULTS[key], where)
        else:
            raise ConfigFileError(f"{where}: unknown config key '{key}'")
    return model_kv, train_kv


def _format_config(cfg) -> str:
    parts = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        parts.append(f"{f.name}={v}")
    return " ".join(parts)


# -- run manifests -----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RunManifest:
    """Record of one command invocation, written next to its outputs.

    Carries wall time, so it is the one output file that is not
    byte-stable across reruns."""

    command: str
    config: dict
    seeds: dict
    inputs: tuple
    outputs: tuple
    tool_version: str
    wall_time_s: float


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(
    path: Path,
    command: str,
    config: dict,
    seeds: dict,
    inputs: list,
    outputs: list,
    started: float,
) -> RunManifest:
    manifest = RunManifest(
        command=command,
        config=config,
        seeds=seeds,
        inputs=tuple(str(p) for p in inputs),
        outputs=tuple(str(p) for p in outputs),
        tool_version=__version__,
        wall_time_s=round(time.perf_counter() - started, 6),
    )
    _atomic_write_text(
        path, json.dumps(dataclasses.asdict(manifest), indent=2, sort_keys=True) + "\n"
    )
    return manifest


def _load_data_dir(data_dir: str) -> tuple[list, list[Path]]:
    d = Path(data_dir)
    if not d.is_dir():
        raise CliError(f"data directory {d} does not exist")
    paths = sorted(d.glob("*.jsonl"))
    if not paths:
        raise CliError(f"no recordings (*.jsonl) in {d}")
    return [load_recording(p) for p in paths], paths


def _check_live_compat(cfg: MixerConfig) -> None:
    if cfg.sensors != SENSOR_COUNT or cfg.markers != MARKER_COUNT:
        raise CliError(
            f"checkpoint geometry (sensors={cfg.sensors}, markers={cfg.markers}) does not "
            f"match the recording format (sensors={SENSOR_COUNT}, markers={MARKER_COUNT})"
        )


# -- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory {out} is not empty; pass --force to write anyway")
    out.mkdir(parents=True, exist_ok=True)
    preset = PhantomSpec.rigid(args.seed) if args.preset == "rigid" else PhantomSpec.default(args.seed)
    recordings = generate_suite(preset, count=args.insertions, frames=args.frames)
    outputs = []
    for rec in recordings:
        p = out / f"{rec.id}.jsonl"
        save_recording(rec, p)
        outputs += [p, p.with_suffix(".meta.json")]
    write_manifest(
        out / "manifest.json",
        "synth",
        {"preset": args.preset, "insertions": args.insertions, "frames": args.frames},
        {"seed": args.seed},
        [],
        outputs,
        started,
    )
    total = sum(len(r) for r in recordings)
    print(f"wrote {len(recordings)} recordings ({total} frames) to {out}")
    return 0


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    started = time.perf_counter()
    recordings, data_paths = _load_data_dir(args.data)
    model_kv, train_kv = parse_config_file(args.config) if args.config else ({}, {})
    if args.seed is not None:
        train_kv["seed"] = args.seed
    if args.epochs is not None:
        train_kv["epochs"] = args.epochs
    model_cfg = MixerConfig(**model_kv)
    train_cfg = TrainConfig(**train_kv)
    _check_live_compat(model_cfg)
    print(f"model config: {_format_config(model_cfg)}")
    print(f"train config: {_format_config(train_cfg)}")

    stats = compute_normalization_stats(recordings)
    samples = collect_samples(recordings, stats, model_cfg)
    if not samples:
        raise CliError("no training windows; every recording is shorter than one window")
    model, curve = train(samples, model_cfg, stats, train_cfg)

    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    curve_path = Path(str(out) + ".loss.csv")
    _atomic_write_text(
        curve_path,
        "epoch,mean_mse\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve, start=1)),
    )
    write_manifest(
        Path(str(out) + ".manifest.json"),
        "train",
        {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg)},
        {"seed": train_cfg.seed},
        data_paths,
        [out, curve_path],
        started,
    )
    print(
        f"trained {model.param_count()} parameters on {len(samples)} windows; "
        f"final epoch loss {curve[-1]:.6g}"
    )
    print(f"saved checkpoint to {out}")
    return 0


# -- eval --------------------------------------------------------------------

_METHOD_LABELS = {
    "proposed": "proposed (this work)",
    "shape-sensor-lstm": "shape-sensor LSTM",
    "regression-forest": "regression forest",
}


def _method_table(mean: float, sd: float | None) -> dict:
    methods = {"proposed": {"mean_mm": mean, "sd_mm": sd}}
    for key, ref in COMPARISON_CONSTANTS.items():
        methods[key] = {"mean_mm": ref["mean"], "sd_mm": ref["sd"]}
    return methods


def _render_report(report: dict, latency: dict | None) -> str:
    lines = ["mean estimation distance (MED) across markers and frames, mm", ""]
    lines.append(f"  {'method':<22} {'mean':>7} {'SD':>7}")
    for key in ("proposed", "shape-sensor-lstm", "regression-forest"):
        m = report["methods"][key]
        sd = m["sd_mm"]
        sd_txt = f"{sd:7.2f}" if sd is not None else "      -"
        lines.append(f"  {_METHOD_LABELS[key]:<22} {m['mean_mm']:7.2f} {sd_txt}")
    unit = "fold" if report["mode"] == "loocv" else "recording"
    lines += ["", f"per-{unit} results, mm"]
    header = f"  {unit:<22} {'MED':>7}"
    if report["mode"] == "loocv":
        header += f" {'baseline':>9}"
    lines.append(header)
    for row in report["rows"]:
        line = f"  {row['id']:<22} {row['med_mm']:7.2f}"
        if report["mode"] == "loocv":
            line += f" {row['baseline_med_mm']:9.2f}"
        lines.append(line)
    tt = report.get("t_test_vs_baseline")
    if tt is not None:
        lines += [
            "",
            f"paired t-test vs predict-training-mean baseline: "
            f"t = {tt['t']:.3f}, p = {tt['p']:.4g}",
        ]
    if latency is not None:
        lines += [
            "",
            "estimation latency, ms per window",
            f"  {'median':>7} {'p95':>7}",
            f"  {latency['median_ms']:7.2f} {latency['p95_ms']:7.2f}",
        ]
    return "\n".join(lines) + "\n"


def _eval_holdout(model: ColonShapeMixer, recordings: list) -> tuple[list, dict]:
    cfg = model.config
    rows = []
    all_times: list[float] = []
    for rec in recordings:
        samples = make_window_samples(
            rec, model.stats, cfg.window_len, cfg.patch_rows, cfg.patch_cols
        )
        if not samples:
            continue
        estimates = []
        truths = []
        for sample in samples:
            start_ns = time.perf_counter_ns()
            estimates.append(model.estimate(sample))
            all_times.append((time.perf_counter_ns() - start_ns) / 1e6)
            truths.append(sample.target)
        result = med(estimates, truths)
        rows.append({"id": rec.id, "med_mm": result.overall, "n_samples": len(samples)})
    if not rows:
        raise CliError("no evaluable windows; every recording is shorter than one window")
    latency = {
        "median_ms": float(np.median(all_times)),
        "p95_ms": float(np.percentile(all_times, 95)),
    }
    return rows, latency


def cmd_eval(args) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.model)
    _check_live_compat(model.config)
    recordings, data_paths = _load_data_dir(args.data)
    report_path = Path(args.out)

    train_cfg = None
    t_test = None
    baseline_mean = None
    timing: dict = {}
    if args.loocv:
        model_kv, train_kv = parse_config_file(args.config) if args.config else ({}, {})
        if model_kv:
            raise CliError(
                "model settings are fixed by the checkpoint; remove from the settings file: "
                + ", ".join(sorted(model_kv))
            )
        if args.seed is not None:
            train_kv["seed"] = args.seed
        if args.epochs is not None:
            train_kv["epochs"] = args.epochs
        train_cfg = TrainConfig(**train_kv)
        result = run_loocv(recordings, model.config, train_cfg)
        rows = [
            {
                "id": f.fold_id,
                "med_mm": f.med,
                "baseline_med_mm": f.baseline_med,
                "n_train_samples": f.n_train_samples,
                "n_test_samples": f.n_test_samples,
            }
            for f in result.folds
        ]
        mean_mm = result.mean_med
        sd_mm = result.sd_med if len(result.folds) > 1 else None
        baseline_mean = float(np.mean([f.baseline_med for f in result.folds]))
        try:
            t_stat, p_val = paired_t_test(
                [f.med for f in result.folds], [f.baseline_med for f in result.folds]
            )
            t_test = {"t": t_stat, "p": p_val}
        except ZeroVarianceError:
            t_test = None
        timing["per_fold"] = [
            {"id": f.fold_id, "median_ms": f.latency_median_ms, "p95_ms": f.latency_p95_ms}
            for f in result.folds
        ]
        latency = {
            "median_ms": float(np.median([f.latency_median_ms for f in result.folds])),
            "p95_ms": float(max(f.latency_p95_ms for f in result.folds)),
        }
    else:
        rows, latency = _eval_holdout(model, recordings)
        meds = [row["med_mm"] for row in rows]
        mean_mm = float(np.mean(meds))
        sd_mm = float(np.std(meds, ddof=1)) if len(meds) > 1 else None

    report = {
        "mode": "loocv" if args.loocv else "holdout",
        "tool_version": __version__,
        "model_config": model.config.to_dict(),
        "train_config": dataclasses.asdict(train_cfg) if train_cfg is not None else None,
        "methods": _method_table(mean_mm, sd_mm),
        "rows": rows,
        "baseline_mean_mm": baseline_mean,
        "t_test_vs_baseline": t_test,
    }
    _atomic_write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    timing["latency_ms"] = latency
    timing["wall_time_s"] = round(time.perf_counter() - started, 6)
    timing_path = Path(str(report_path) + ".timing.json")
    _atomic_write_text(timing_path, json.dumps(timing, indent=2, sort_keys=True) + "\n")
    write_manifest(
        Path(str(report_path) + ".manifest.json"),
        "eval",
        {
            "model": str(args.model),
            "loocv": bool(args.loocv),
            "train": dataclasses.asdict(train_cfg) if train_cfg is not None else None,
        },
        {"seed": train_cfg.seed} if train_cfg is not None else {},
        data_paths + [Path(args.model)],
        [report_path, timing_path],
        started,
    )
    sys.stdout.write(_render_report(report, latency))
    print(f"report written to {report_path}")
    return 0


# -- estimate ----------------------------------------------------------------


def _parse_stream_frame(raw: str) -> ColonoscopeFrame:
    """One kinematics frame from a stream line. The colon field of the
    recording format is not required and is ignored when present."""
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    try:
        t = obj["t"]
        scope = obj["scope"]
        pos = np.asarray(scope["pos"], dtype=np.float64)
        dirs = np.asarray(scope["dir"], dtype=np.float64)
        length = float(scope["len"])
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ValueError(f"malformed frame: {exc}") from None
    if not isinstance(t, int):
        raise ValueError(f"time step must be an integer, got {t!r}")
    return ColonoscopeFrame(t=t, positions=pos, directions=dirs, insertion_length=length)


def cmd_estimate(args) -> int:
    model = load_checkpoint(args.model)
    _check_live_compat(model.config)
    cfg = model.config
    in_stream = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    out_stream = (
        sys.stdout if args.output == "-" else open(args.output, "w", encoding="utf-8", newline="\n")
    )
    window: collections.deque = collections.deque(maxlen=cfg.window_len)
    last_t = None
    emitted = 0
    try:
        for lineno, raw in enumerate(in_stream, start=1):
            if not raw.strip():
                continue
            try:
                frame = _parse_stream_frame(raw)
            except ValueError as exc:
                print(f"estimate: line {lineno}: {exc}", file=sys.stderr)
                continue
            if last_t is not None and frame.t != last_t + 1:
                print(
                    f"estimate: line {lineno}: time step {frame.t} does not follow {last_t}; "
                    "window reset",
                    file=sys.stderr,
                )
                window.clear()
            last_t = frame.t
            window.append(frame)
            if len(window) < cfg.window_len:
                continue
            start_ns = time.perf_counter_ns()
            xi, lengths = build_window_features(
                list(window)[::-1], model.stats, cfg.window_len, cfg.patch_rows, cfg.patch_cols
            )
            y = model.forward_batch(xi[None, :, :], lengths[None, :])[0]
            markers = denormalize(y, model.stats, "position").reshape(cfg.markers, 3)
            latency_ms = (time.perf_counter_ns() - start_ns) / 1e6
            record = {"t_c": frame.t, "markers": markers.tolist()}
            if not args.no_timing:
                record["latency_ms"] = round(latency_ms, 3)
            out_stream.write(json.dumps(record) + "\n")
            out_stream.flush()
            emitted += 1
    finally:
        if in_stream is not sys.stdin:
            in_stream.close()
        if out_stream is not sys.stdout:
            out_stream.close()
    print(f"estimate: {emitted} estimates emitted", file=sys.stderr)
    return 0


# -- verify ------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _unit_stats() -> NormalizationStats:
    return NormalizationStats(
        pos_min=np.zeros(3), pos_max=np.ones(3), len_min=0.0, len_max=1.0
    )


def _check_gradients_model(name: str, cfg: MixerConfig, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 100)
    model = ColonShapeMixer(cfg, _unit_stats(), seed=seed)
    batch = 3
    xi = rng.uniform(-1.0, 1.0, (batch, cfg.seq_len, cfg.patch_len))
    lengths = rng.uniform(0.0, 1.0, (batch, cfg.window_len))
    target = rng.uniform(0.0, 1.0, (batch, cfg.out_dim))
    model.zero_grad()
    y = model.forward_batch(xi, lengths)
    _, d_out = mse_loss(y, target)
    model.backward_batch(d_out)
    report = check_gradients(
        model.fd_loss_closure(xi, lengths, target), model.params(), model.grads()
    )
    return CheckResult(name, report.passed, str(report))


def _small_verify_config() -> MixerConfig:
    return MixerConfig(
        sensors=2,
        markers=2,
        window_len=2,
        patch_rows=3,
        patch_cols=1,
        hidden_dim=3,
        num_blocks=2,
        patch_mlp_dim=4,
        channel_mlp_dim=5,
        mix_dropout=0.0,
        head_dropout=0.0,
        length_feat_dim=2,
        head_dims=(6, 5),
    )


def _full_verify_config() -> MixerConfig:
    return MixerConfig(
        hidden_dim=8,
        num_blocks=2,
        patch_mlp_dim=8,
        channel_mlp_dim=8,
        mix_dropout=0.0,
        head_dropout=0.0,
        length_feat_dim=4,
        head_dims=(16, 8),
    )


def _check_patch_round_trip() -> CheckResult:
    rng = np.random.default_rng(3)
    cases = 0
    for rows, cols in ((18, 18), (6, 12), (12, 6)):
        for s1 in (1, 2, 3, 6):
            if rows % s1:
                continue
            for s2 in (1, 2, 3):
                if cols % s2:
                    continue
                m = rng.standard_normal((rows, cols))
                back = reassemble_patches(extract_patches(m, s1, s2), rows, cols, s1, s2)
                if not np.array_equal(back, m):
                    return CheckResult(
                        "patch-round-trip",
                        False,
                        f"mismatch at rows={rows} cols={cols} patch={s1}x{s2}",
                    )
                cases += 1
    return CheckResult("patch-round-trip", True, f"{cases} shapes round-tripped exactly")


def _check_med_oracle() -> CheckResult:
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        frames = int(rng.integers(2, 6))
        estimates = []
        truths = []
        for t in range(1, frames + 1):
            estimates.append(
                EstimatedColonShape(markers=rng.uniform(-50, 50, (MARKER_COUNT, 3)), t_c=t)
            )
            truths.append(ColonFrame(t=t, markers=rng.uniform(-50, 50, (MARKER_COUNT, 3))))
        total = 0.0
        for est, truth in zip(estimates, truths):
            for m in range(MARKER_COUNT):
                total += math.sqrt(
                    sum((est.markers[m, k] - truth.markers[m, k]) ** 2 for k in range(3))
                )
        oracle = total / (MARKER_COUNT * frames)
        worst = max(worst, abs(oracle - med(estimates, truths).overall))
    passed = worst < 1e-12
    return CheckResult("med-oracle", passed, f"max |difference| vs loop oracle {worst:.3e}")


def _check_train_determinism() -> CheckResult:
    rec = generate_recording(PhantomSpec.default(seed=2), frames=26, rec_id="verify")
    cfg = _full_verify_config()
    stats = compute_normalization_stats([rec])
    samples = collect_samples([rec], stats, cfg)
    tcfg = TrainConfig(batch_size=4, epochs=2, seed=3)
    m1, c1 = train(samples, cfg, stats, tcfg)
    m2, c2 = train(samples, cfg, stats, tcfg)
    same_curve = c1 == c2
    diff = [k for k in m1.params() if not np.array_equal(m1.params()[k], m2.params()[k])]
    if same_curve and not diff:
        return CheckResult(
            "train-determinism", True, "two runs produced bitwise-identical weights and losses"
        )
    detail = "loss curves differ" if not same_curve else f"weights differ: {', '.join(diff[:3])}"
    return CheckResult("train-determinism", False, detail)


def run_verify(level: str = "quick") -> list[CheckResult]:
    """Self-checks for the numerical core. `quick` runs in well under a
    minute; `full` adds a finite-difference sweep of a thin model at the
    real input geometry."""
    if level not in ("quick", "full"):
        raise CliError(f"unknown verify level {level!r}")
    results = [
        _check_patch_round_trip(),
        _check_med_oracle(),
        _check_gradients_model("gradient-check-small", _small_verify_config(), seed=7),
        _check_train_determinism(),
    ]
    if level == "full":
        results.append(
            _check_gradients_model("gradient-check-full-geometry", _full_verify_config(), seed=9)
        )
    return results


def cmd_verify(args) -> int:
    results = run_verify(args.level)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<{width}}  {r.detail}")
    failures = sum(1 for r in results if not r.passed)
    if failures:
        print(f"verify: {failures} of {len(results)} checks failed", file=sys.stderr)
        return 1
    print(f"verify: all {len(results)} checks passed ({args.level})")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colonmixer",
        description="Colon shape estimation from colonoscope kinematics.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic phantom data suite")
    p.add_argument("--out", required=True, help="output directory for recordings")
    p.add_argument("--insertions", type=int, default=8, help="number of recordings")
    p.add_argument("--frames", type=int, default=173, help="nominal frames per recording")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=("default", "rigid"), default="default")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an estimator on a directory of recordings")
    p.add_argument("--data", required=True, help="directory of .jsonl recordings")
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")
    p.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report estimation error for a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="directory of .jsonl recordings")
    p.add_argument(
        "--loocv", action="store_true", help="retrain per held-out recording instead"
    )
    p.add_argument("--config", default=None, help="training settings file for --loocv")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")
    p.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    p.add_argument("--out", default="report.json", help="report path to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("estimate", help="stream shape estimates from kinematics frames")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", default="-", help="JSON-lines frames; '-' reads stdin")
    p.add_argument("--output", default="-", help="'-' writes stdout")
    p.add_argument(
        "--no-timing", action="store_true", help="omit latency_ms for byte-stable output"
    )
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("verify", help="self-check the numerical core")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except (CheckpointError, RecordingFormatError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
