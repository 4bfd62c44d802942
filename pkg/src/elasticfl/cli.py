"""Command-line runner: ``run``, ``report`` and ``validate``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import subprocess
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, build_run, from_dict, parse_config
from .fedcore import RoundMetrics, run_rounds

MANIFEST = "manifest.json"


def metrics_name(seed: int) -> str:
    return f"metrics_seed{seed}.csv"


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def metrics_csv(rows: list[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RoundMetrics.columns())
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in RoundMetrics.columns()])
    return buf.getvalue()


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return []
    if list(rows[0]) != RoundMetrics.columns():
        raise ValueError(f"{path}: unexpected columns {list(rows[0])}")
    return [{k: float(v) for k, v in row.items()} for row in rows]


def atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def commit_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def _run_seed(echo: dict, seed: int) -> str:
    cfg = from_dict(echo)
    return metrics_csv(run_rounds(build_run(cfg, seed)))


def cmd_run(config_path, overrides: list[str] | None = None, out: str | None = None, jobs: int = 1) -> int:
    try:
        cfg = parse_config(config_path, overrides)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2
    out_dir = Path(out if out is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    written: list[Path] = []
    try:
        if jobs > 1 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                texts = list(ex.map(_run_seed, [echo] * len(cfg.seeds), cfg.seeds))
        else:
            texts = [_run_seed(echo, s) for s in cfg.seeds]
        for seed, text in zip(cfg.seeds, texts):
            path = out_dir / metrics_name(seed)
            atomic_write(path, text)
            written.append(path)
        manifest = {
            "config": echo,
            "commit": commit_hash(),
            "version": __version__,
            "seeds": cfg.seeds,
            "metrics": {str(s): metrics_name(s) for s in cfg.seeds},
        }
        path = out_dir / MANIFEST
        atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        written.append(path)
    except Exception as e:  # noqa: BLE001 - any failure aborts the run and cleans up
        for p in written:
            p.unlink(missing_ok=True)
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(cfg.seeds)} metrics file(s) and {MANIFEST} to {out_dir}")
    return 0


def summarize(run_dir) -> dict:
    run_dir = Path(run_dir)
    files = sorted(run_dir.glob("metrics_*.csv"))
    if not files:
        raise FileNotFoundError(f"{run_dir} contains no metrics files")
    runs = []
    for f in files:
        rows = read_metrics(f)
        if not rows:
            raise ValueError(f"{f} has no rows")
        acc = [r["test_acc_mean"] for r in rows]
        runs.append({
            "file": f.name,
            "bmta": max(acc) if not all(math.isnan(a) for a in acc) else math.nan,
            "final_acc": acc[-1],
            "final_loss": rows[-1]["train_loss"],
            "bits_up": int(sum(r["bits_up"] for r in rows)),
            "bits_down": int(sum(r["bits_down"] for r in rows)),
            "rounds": int(rows[-1]["round"]),
        })
    bm = np.array([r["bmta"] for r in runs])
    return {"runs": runs, "bmta_mean": float(bm.mean()), "bmta_std": float(bm.std())}


def _json_safe(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


def cmd_report(run_dir, as_json: bool = False) -> int:
    try:
        summary = summarize(run_dir)
    except (OSError, ValueError) as e:
        print(e, file=sys.stderr)
        return 1
    if as_json:
        print(json.dumps(_json_safe(summary), indent=2))
        return 0
    header = f"{'run':<24}{'BMTA':>10}{'final acc':>11}{'final loss':>12}{'bits up':>14}{'bits down':>14}"
    print(header)
    print("-" * len(header))
    for r in summary["runs"]:
        print(f"{r['file']:<24}{r['bmta']:>10.4f}{r['final_acc']:>11.4f}{r['final_loss']:>12.5f}"
              f"{r['bits_up']:>14d}{r['bits_down']:>14d}")
    print(f"BMTA over {len(summary['runs'])} run(s): {summary['bmta_mean']:.4f} +/- {summary['bmta_std']:.4f}")
    return 0


def cmd_validate(config_path, overrides: list[str] | None = None) -> int:
    try:
        cfg: ExperimentConfig = parse_config(config_path, overrides)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2
    print(f"ok: {cfg.dataset.kind} dataset, {cfg.hp.algorithm}, T={cfg.hp.T}, seeds={cfg.seeds}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="elasticfl", description="Federated learning experiment runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel")

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.overrides, args.out, args.jobs)
    if args.command == "report":
        return cmd_report(args.run_dir, args.json)
    return cmd_validate(args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
