"""Command-line front end: run one experiment, sweep a grid, render reports.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 at least one sweep cell failed, 5 report asked for an incomplete run.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .chain import (
    METHODS,
    ConfigError,
    PipelineConfig,
    config_hash,
    config_to_dict,
    resolve_config,
    run_pipeline,
)
from .gem import QpConvergenceError
from .io import (
    load_recognizer,
    load_synthesizer,
    save_recognizer,
    save_synthesizer,
    write_csv,
    write_error_matrix_csv,
    write_json_atomic,
    write_memory_dump,
)
from .recognizer import TrainingDivergenceError
from .report import IncompleteRunError, write_report

CURVE_COLUMNS = ("stage", "method", "step", "task_id", "split", "cer", "loss")
TRACE_COLUMNS = ("step", "task_id", "n_constraints", "n_violated", "iterations", "max_dual")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _out_root(flag_value) -> Path:
    if flag_value:
        return Path(flag_value)
    env = os.environ.get("CHAINGEM_OUT")
    return Path(env) if env else Path(".")


def _load_raw_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


def _parse_stages(text: str) -> list[int]:
    tokens = [t for t in re.split(r"[,\s]+", text.strip()) if t]
    if not tokens:
        raise ConfigError("--stages given but empty")
    try:
        stages = sorted({int(t) for t in tokens})
    except ValueError as err:
        raise ConfigError(f"--stages must list integers, got {text!r}") from err
    return stages


def _package_version() -> str:
    from . import __version__

    return __version__


def _write_manifest(
    run_dir: Path, config: PipelineConfig, status: str, stage_status: dict, created: str, finalized
) -> None:
    payload = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "version": f"chaingem-{_package_version()}",
        "created_at": created,
        "finalized_at": finalized,
        "status": status,
        "stages": stage_status,
    }
    write_json_atomic(payload, run_dir / "manifest.json")


def _execute_run(config: PipelineConfig, run_dir: Path, initial=None) -> dict:
    """Run the pipeline and write every artifact into ``run_dir``."""

    run_dir.mkdir(parents=True, exist_ok=True)
    created = _now()
    stage_status = {
        f"stage{k}": ("pending" if k in config.stages else "skipped") for k in (1, 2, 3)
    }
    _write_manifest(run_dir, config, "running", stage_status, created, None)
    write_json_atomic(config_to_dict(config), run_dir / "config.json")

    try:
        result = run_pipeline(config, initial=initial)
    except Exception:
        for key, value in stage_status.items():
            if value == "pending":
                stage_status[key] = "failed"
        _write_manifest(run_dir, config, "failed", stage_status, created, _now())
        raise

    if result.stage1 is not None:
        save_recognizer(result.stage1.asr, run_dir / "recognizer_stage1.ckpt")
        save_synthesizer(result.stage1.synth, run_dir / "synthesizer_stage1.ckpt")
        stage_status["stage1"] = "done"
    if result.stage2 is not None:
        if result.stage2.report.get("stage2_enabled"):
            save_recognizer(result.stage2.asr, run_dir / "recognizer_stage2.ckpt")
            save_synthesizer(result.stage2.synth, run_dir / "synthesizer_stage2.ckpt")
        stage_status["stage2"] = "done"
    save_recognizer(result.asr, run_dir / "recognizer_final.ckpt")
    save_synthesizer(result.synth, run_dir / "synthesizer_final.ckpt")

    write_csv(run_dir / "curves.csv", CURVE_COLUMNS, result.curves)

    metrics = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "method": config.method,
        "stages": ",".join(str(s) for s in config.stages),
    }
    if result.stage1 is not None:
        metrics.update(result.stage1.report)
    if result.stage2 is not None:
        metrics.update(result.stage2.report)
    if result.stage3 is not None:
        stage_status["stage3"] = "done"
        metrics.update(result.stage3.report)
        write_error_matrix_csv(run_dir / "error_matrix.csv", result.stage3.matrix)
        write_error_matrix_csv(
            run_dir / "reference_error_matrix.csv", result.stage3.reference_matrix
        )
        if config.method == "gem":
            write_memory_dump(run_dir / "memory_dump.tsv", result.stage3.memories)
            write_csv(run_dir / "projection_trace.csv", TRACE_COLUMNS, result.stage3.trace)
    write_json_atomic(metrics, run_dir / "metrics.json")

    _write_manifest(run_dir, config, "complete", stage_status, created, _now())
    return metrics


def _load_initial(resume_dir: Path):
    for tag in ("stage2", "stage1", "final"):
        asr_path = resume_dir / f"recognizer_{tag}.ckpt"
        synth_path = resume_dir / f"synthesizer_{tag}.ckpt"
        if asr_path.is_file() and synth_path.is_file():
            return load_recognizer(asr_path), load_synthesizer(synth_path)
    raise ConfigError(f"no recognizer/synthesizer checkpoint pair found in {resume_dir}")


def cmd_run(args) -> int:
    try:
        raw = _load_raw_config(args.config)
        if args.method is not None:
            raw["method"] = args.method
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.stages is not None:
            raw["stages"] = _parse_stages(args.stages)
        config = resolve_config(raw)
        initial = None
        if 1 not in config.stages:
            if args.resume is None:
                raise ConfigError("stage 1 is skipped; pass --resume DIR with checkpoints")
            initial = _load_initial(Path(args.resume))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    if args.out:
        run_dir = Path(args.out)
    else:
        run_dir = _out_root(None) / f"run-{config_hash(config)[:12]}"

    try:
        metrics = _execute_run(config, run_dir, initial=initial)
    except (TrainingDivergenceError, QpConvergenceError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 3

    print(f"run complete: {run_dir}")
    for key in ("avg", "bwt", "fwt"):
        if key in metrics:
            print(f"  {key} = {metrics[key]:.4f}")
    return 0


def _sweep_cell(payload) -> dict:
    """One sweep cell; module-level so process pools can pickle it."""

    raw, run_dir, fraction_token, seed = payload
    row = {"labeled_fraction": fraction_token, "seed": seed, "status": "ok", "error": ""}
    try:
        config = resolve_config(raw)
        metrics = _execute_run(config, Path(run_dir))
    except Exception as err:  # cell failures are recorded, not fatal
        row["status"] = "failed"
        row["error"] = f"{type(err).__name__}: {err}"
        return row
    has_stage3 = any(key.startswith("final_cer_task_") for key in metrics)
    for key, value in metrics.items():
        if key.startswith("final_cer_task_") or key in ("avg", "bwt", "fwt"):
            row[key] = value
        elif not has_stage3 and key.startswith("stage2_test_cer_task_"):
            # A pipeline that stops after stage 2 reports its last model's
            # test CERs under the same column names.
            row["final_cer_task_" + key.rsplit("_", 1)[1]] = value
    return row


def cmd_sweep(args) -> int:
    try:
        raw = _load_raw_config(args.config)
        if args.seeds is not None:
            seed_tokens = [t for t in re.split(r"[,\s]+", args.seeds.strip()) if t]
            seeds = [int(t) for t in seed_tokens] if seed_tokens else []
        else:
            seeds = [0]
        if not seeds:
            raise ConfigError("--seeds given but empty")
        fraction_tokens = [t for t in re.split(r"[,\s]+", args.labeled_fractions.strip()) if t]
        if not fraction_tokens:
            raise ConfigError("--labeled-fractions given but empty")
        fractions = []
        for token in fraction_tokens:
            value = float(token)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"labeled fraction {token} outside (0, 1]")
            fractions.append(value)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)

    payloads = []
    try:
        for token, fraction in zip(fraction_tokens, fractions):
            for seed in seeds:
                cell_raw = dict(raw)
                cell_raw["labeled_fraction"] = fraction
                cell_raw["seed"] = seed
                resolve_config(cell_raw)  # fail fast on a bad grid
                payloads.append((cell_raw, str(out / f"cell-f{token}-s{seed}"), token, seed))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    if args.jobs == 1:
        rows = [_sweep_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, payloads))

    task_keys = sorted(
        {k for row in rows for k in row if k.startswith("final_cer_task_")},
        key=lambda k: int(k.rsplit("_", 1)[1]),
    )
    columns = ["labeled_fraction", "seed", "status", *task_keys, "avg", "bwt", "fwt", "error"]
    filled = [{col: row.get(col, "") for col in columns} for row in rows]
    write_csv(out / "summary.csv", columns, filled)

    failed = [row for row in rows if row["status"] != "ok"]
    print(f"sweep complete: {len(rows) - len(failed)}/{len(rows)} cells ok, summary at {out / 'summary.csv'}")
    for row in failed:
        print(
            f"  cell fraction={row['labeled_fraction']} seed={row['seed']} failed: {row['error']}",
            file=sys.stderr,
        )
    return 4 if failed else 0


def cmd_report(args) -> int:
    try:
        outcome = write_report(args.run, args.out)
    except IncompleteRunError as err:
        print(f"incomplete run: {err}", file=sys.stderr)
        return 5
    print(outcome["table"])
    print(f"report written to {outcome['out_dir']} ({', '.join(outcome['figures'])})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chaingem",
        description="Speech-chain continual learning experiments with GEM replay.",
    )
    parser.add_argument("--version", action="version", version=f"chaingem {_package_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the pipeline once")
    run_p.add_argument("--config", required=True, help="JSON config file")
    run_p.add_argument("--method", choices=list(METHODS), help="override the stage-3 method")
    run_p.add_argument("--seed", type=int, help="override the root seed")
    run_p.add_argument("--stages", help="comma-separated subset of 1,2,3")
    run_p.add_argument("--out", help="run directory (default: $CHAINGEM_OUT/run-<hash>)")
    run_p.add_argument("--resume", help="run directory with checkpoints, for runs skipping stage 1")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a labeled-fraction x seed grid")
    sweep_p.add_argument("--config", required=True, help="JSON config file")
    sweep_p.add_argument("--labeled-fractions", default="0.3,0.5,0.7", help="comma-separated fractions in (0,1]")
    sweep_p.add_argument("--seeds", default="0", help="comma-separated seeds")
    sweep_p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sweep_p.add_argument("--out", help="sweep output directory (default: $CHAINGEM_OUT or .)")
    sweep_p.set_defaults(func=cmd_sweep)

    report_p = sub.add_parser("report", help="render tables, curves CSV, and figures for a run")
    report_p.add_argument("--run", required=True, help="completed run directory")
    report_p.add_argument("--out", help="report directory (default: <run>-report)")
    report_p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
