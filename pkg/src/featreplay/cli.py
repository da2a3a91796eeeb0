"""Command-line entry point: ``run``, ``sweep``, ``dump`` and ``validate``.

Exit statuses: 0 success, 1 numeric or runtime failure, 2 I/O, 3 configuration.
Every file written carries the config hash: JSON files as a ``config_hash``
key, CSV files as a leading ``# config_hash: <hash>`` comment line followed by
the header row.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, apply_env_overrides, config_hash, from_dict, sweep_settings
from .continual import EngineState, run_stream
from .errors import ConfigError, ContractViolation, NumericFailure
from .nets import Generator, load_checkpoint, restore_params, save_checkpoint
from .tasks import named_rng

EXIT_OK, EXIT_NUMERIC, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3

METRIC_COLUMNS = (
    "task",
    "step",
    "current_task",
    "feature_term",
    "image_term",
    "aux_class_term",
    "lipschitz_term",
    "total",
    "lambda_t",
    "alpha",
    "critic_loss",
    "feature_critic_loss",
)
COMPARISON_COLUMNS = (
    "setting",
    "config_hash",
    "status",
    "A_half",
    "A_T",
    "overall_fs",
    "overall_cfs",
    "slope_fs",
    "slope_cfs",
    "error",
)


# ---------------------------------------------------------------- file helpers


def write_json(path: Path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")


def write_csv(path: Path, digest: str, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash: {digest}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else _fmt(row.get(c)) for c in columns])


def read_csv(path: Path) -> tuple[str, list[dict]]:
    """Inverse of :func:`write_csv`: returns the embedded hash and the rows as strings."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash: "):
            raise ContractViolation(f"{path} does not carry a config hash")
        return first.split(": ", 1)[1], list(csv.DictReader(fh))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _prepare_out_dir(out: Path, digest: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    existing = out / "config.json"
    if existing.exists():
        try:
            previous = json.loads(existing.read_text(encoding="utf-8")).get("config_hash")
        except (json.JSONDecodeError, AttributeError):
            previous = None
        if previous != digest:
            raise ConfigError(f"out_dir: {out} holds artifacts of config {previous}; refusing to mix with {digest}")
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")


# ---------------------------------------------------------------- config loading


def load_config(path: str | None, seed: int | None = None, out: str | None = None, environ=None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
    raw = apply_env_overrides(raw, environ)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out_dir"] = out
    return from_dict(raw)


# ---------------------------------------------------------------- run


def execute_run(config: ExperimentConfig, quiet: bool = True):
    """Run one configuration and write every artifact into ``config.out_dir``."""
    digest = config_hash(config)
    out = Path(config.out_dir)
    _prepare_out_dir(out, digest)
    write_json(out / "config.json", {"config_hash": digest, "config": config.to_json()})

    def on_task_end(state: EngineState, t: int) -> None:
        meta = {"task": t, "config": config.to_json(), "seed": config.seed}
        save_checkpoint(out / f"checkpoint_task{t}.npz", state.model, digest, meta)
        if not quiet:
            acc = state.accuracy.get(t, {})
            mean_acc = f"{np.mean(list(acc.values())):.3f}" if acc else "n/a"
            print(f"  task {t}/{state.stream.T} done  d_t^(t)={state.ledger[t, t]:.4f}  accuracy={mean_acc}", file=sys.stderr)

    state, ledger, report = run_stream(config, on_task_end=on_task_end)
    write_csv(out / "metrics.csv", digest, METRIC_COLUMNS, state.loss_log)
    write_json(out / "ledger.json", {"config_hash": digest, **ledger.to_json()})
    write_json(out / "report.json", report.to_json(include_timings=False))
    write_json(out / "timings.json", {"config_hash": digest, "timings": report.timings})
    return report


def summary_table(report) -> str:
    fr = report.forgetfulness or {}
    lines = [f"config {report.config_hash}  seed {report.seed}", f"{'task':>4}  {'accuracy':>8}  {'FS_t':>10}  {'CFS_t':>10}"]
    for row in report.tasks:
        t = str(row["t"])
        acc = row["average_accuracy"]
        fs, cfs = fr.get("fs", {}).get(t), fr.get("cfs", {}).get(t)
        lines.append(
            f"{t:>4}  {_cell(acc, 8, '.3f')}  {_cell(fs, 10, '.4f')}  {_cell(cfs, 10, '.4f')}"
        )
    acc = report.accuracy
    lines.append(f"A_{acc['A_half_t']} = {acc['A_half']:.3f}   A_T = {acc['A_T']:.3f}")
    if fr:
        lines.append(
            f"FS = {fr['overall_fs']:.4f}   CFS = {fr['overall_cfs']:.4f}   "
            f"k(FS) = {_cell(fr['slope_fs'], 0, '.4f')}   k(CFS) = {_cell(fr['slope_cfs'], 0, '.4f')}"
        )
    else:
        lines.append("FS, CFS, k: n/a (fewer than two tasks)")
    for w in report.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def _cell(value, width: int, spec: str) -> str:
    text = "n/a" if value is None else format(value, spec)
    return text.rjust(width)


# ---------------------------------------------------------------- sweep


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label)


def execute_sweep(config: ExperimentConfig, quiet: bool = True) -> tuple[list[dict], int]:
    """One run per sweep value, sharing the seed; a failing setting is recorded and the sweep goes on."""
    settings = sweep_settings(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    worst = EXIT_OK
    for label, setting in settings:
        setting = setting.with_out_dir(str(out / _slug(label)))
        row = {"setting": label, "config_hash": config_hash(setting), "status": "ok"}
        if not quiet:
            print(f"sweep: {label}", file=sys.stderr)
        try:
            report = execute_run(setting, quiet=quiet)
        except Exception as exc:  # recorded per setting, the sweep continues
            code = exit_code_for(exc)
            worst = worst or code
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            _write_error(Path(setting.out_dir), exc, code, row["config_hash"])
        else:
            fr = report.forgetfulness or {}
            row.update(
                A_half=report.accuracy["A_half"],
                A_T=report.accuracy["A_T"],
                overall_fs=fr.get("overall_fs"),
                overall_cfs=fr.get("overall_cfs"),
                slope_fs=fr.get("slope_fs"),
                slope_cfs=fr.get("slope_cfs"),
            )
        rows.append(row)
    digest = config_hash(config)
    write_csv(out / "comparison.csv", digest, COMPARISON_COLUMNS, rows)
    write_json(
        out / "comparison.json",
        {"config_hash": digest, "axis": config.sweep.axis, "settings": [{c: r.get(c) for c in COMPARISON_COLUMNS} for r in rows]},
    )
    return rows, worst


# ---------------------------------------------------------------- dump


def dump_samples(checkpoint_path: str, out: str, conditions=None, n: int = 100, seed: int = 0, expected_hash: str | None = None) -> list[Path]:
    """Write one CSV of generated rows per condition from a saved checkpoint."""
    if n <= 0:
        raise ConfigError("dump.n: must be > 0")
    ckpt = load_checkpoint(checkpoint_path)
    config = from_dict(ckpt.meta["config"])
    digest = config_hash(config)
    if digest != ckpt.config_hash:
        raise ConfigError(f"checkpoint: embedded config hashes to {digest}, header says {ckpt.config_hash}")
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        raise ConfigError(f"checkpoint: was written by config {ckpt.config_hash}, expected {expected_hash}")
    stream, model = config.stream, config.model
    data_dim = 2 if stream.name == "gauss2d" else 64
    generator = Generator(model.latent_dim, data_dim, stream.T, model.generator_hidden, squash=stream.name == "glyphs8")
    restore_params(generator, ckpt, "generator")
    trained = int(ckpt.meta.get("task", stream.T))
    conditions = list(range(trained)) if conditions is None else [int(c) for c in conditions]
    for c in conditions:
        if not 0 <= c < trained:
            raise ConfigError(f"dump.conditions: {c} is outside the {trained} condition(s) trained by this checkpoint")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = [f"x{k}" for k in range(data_dim)]
    paths = []
    for c in conditions:
        z = named_rng(seed, "dump", c).standard_normal((n, model.latent_dim))
        with ad.no_grad():
            x = generator.forward(z, c).data
        path = out_dir / f"samples_c{c}.csv"
        write_csv(path, digest, columns, [dict(zip(columns, map(float, row))) for row in x])
        paths.append(path)
    return paths


# ---------------------------------------------------------------- errors


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_NUMERIC


def _error_payload(exc: BaseException, code: int, digest: str | None) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "config_hash": digest}
    if isinstance(exc, NumericFailure):
        payload["step"] = exc.step
        payload["node"] = None if exc.node is None else repr(exc.node)
        payload["breakdown"] = None if exc.breakdown is None else exc.breakdown.as_dict()
    return payload


def _write_error(out: Path | None, exc: BaseException, code: int, digest: str | None) -> None:
    payload = _error_payload(exc, code, digest)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "error.json", payload)
        except OSError:
            pass
    print(f"error ({code}): {payload['error']}: {payload['message']}", file=sys.stderr)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featreplay", description="Continual conditional-GAN training with generative replay.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON config")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--quiet", action="store_true", help="suppress progress and the summary table")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train one configuration over its task stream")
    sub.add_parser("sweep", parents=[common], help="one run per value of the configured sweep axis")
    sub.add_parser("validate", parents=[common], help="validate a config and print it with defaults filled in")
    dump = sub.add_parser("dump", parents=[common], help="write generated samples from a checkpoint")
    dump.add_argument("--checkpoint", required=True, help="checkpoint_task<t>.npz written by run")
    dump.add_argument("--conditions", type=int, nargs="+", help="conditions to sample (default: all trained)")
    dump.add_argument("-n", type=int, default=100, help="rows per condition")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    digest = None
    try:
        if args.command == "dump":
            expected = None
            if args.config is not None:
                expected = config_hash(load_config(args.config))
            paths = dump_samples(
                args.checkpoint, args.out or ".", args.conditions, args.n, 0 if args.seed is None else args.seed, expected
            )
            if not args.quiet:
                print("\n".join(str(p) for p in paths))
            return EXIT_OK
        config = load_config(args.config, args.seed, args.out)
        digest = config_hash(config)
        out = Path(config.out_dir)
        if args.command == "validate":
            print(json.dumps({"config_hash": digest, "config": config.to_json()}, sort_keys=True, indent=2))
            return EXIT_OK
        if args.command == "run":
            report = execute_run(config, quiet=args.quiet)
            if not args.quiet:
                print(summary_table(report))
            return EXIT_OK
        if config.sweep is None:
            raise ConfigError("sweep: the config has no sweep axis")
        rows, worst = execute_sweep(config, quiet=args.quiet)
        if not args.quiet:
            for row in rows:
                a = row.get("A_T")
                fs = row.get("overall_fs")
                print(f"{row['setting']:<28} {row['status']:<7} A_T={_cell(a, 6, '.3f')} FS={_cell(fs, 9, '.4f')}")
        return worst
    except (ConfigError, ContractViolation, NumericFailure, OSError, ArithmeticError, ValueError) as exc:
        code = exit_code_for(exc)
        _write_error(out if args.command != "validate" else None, exc, code, digest)
        return code


if __name__ == "__main__":
    sys.exit(main())
