"""Batch entry point: ``deepm <command> [--config FILE] [--out DIR] ...``.

Commands and the directory each writes under the output root::

    synth     data/       prices.csv, universe.csv, graph_edges.csv
    features  features/   features.npy/.json, sigma.npy, targets.npy
    train     train/      checkpoints/, train_manifest.json (resumable)
    backtest  backtest/   metrics.csv, series/, positions.csv
    ablate    ablate/     one train/backtest pair per row plus metrics.csv
    verify    verify/     results.csv; exit 1 if any check fails
    report    report/     report.md, metrics.csv, equity_curves.csv

Every stage directory gets a ``manifest.json`` stamped with the config and
data hashes. Stages other than ``train`` are written to a scratch directory
and renamed into place, so a crashed run never leaves a half-written stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import pipeline
from .backtest import write_metric_table
from .config import ConfigError, RunConfig, load_config
from .data import save_features
from .verify import run_checks, write_results

log = logging.getLogger("deepm")

COMMANDS = ("synth", "features", "train", "backtest", "ablate", "verify", "report")


@contextmanager
def atomic_dir(target: Path):
    """Yield a scratch directory that replaces ``target`` on success."""
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}-", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def stamp(out: Path, cfg: RunConfig, data_hash: str | None, **extra) -> None:
    meta = {"config_hash": cfg.hash(), "data_hash": data_hash, **extra}
    path = out / "manifest.json"
    if path.exists():
        meta = {**json.loads(path.read_text()), **meta}
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def resolve(args) -> RunConfig:
    cfg = load_config(args.config, paper_scale=args.paper_scale)
    if args.seed is not None:
        cfg = replace(cfg, seeds=tuple(args.seed + k for k in range(cfg.ensemble.n_seeds)))
    return cfg


# ------------------------------------------------------------------ stages


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    ds = pipeline.load_dataset(cfg)
    with atomic_dir(out / "data") as tmp:
        pipeline.write_inputs(ds, tmp)
        stamp(tmp, cfg, ds.data_hash, n_assets=ds.panel.n_assets, n_days=ds.panel.n_days)
    return 0


def cmd_features(cfg: RunConfig, out: Path, args) -> int:
    ds = pipeline.load_dataset(cfg)
    stamps = {"config_hash": cfg.hash(), "data_hash": ds.data_hash,
              "tickers": list(ds.panel.tickers), "dates": [str(ds.panel.dates[0]), str(ds.panel.dates[-1])]}
    with atomic_dir(out / "features") as tmp:
        save_features(ds.data.features, tmp / "features", stamps)
        np.save(tmp / "sigma.npy", np.ascontiguousarray(ds.data.vol.sigma, dtype="<f8"))
        np.save(tmp / "targets.npy", np.ascontiguousarray(ds.data.targets, dtype="<f8"))
        stamp(tmp, cfg, ds.data_hash, names=list(ds.data.features.names))
    return 0


def _train(cfg: RunConfig, ds, root: Path, jobs: int) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    manifest = pipeline.train_all(cfg, ds, root, jobs=jobs)
    stamp(root, cfg, ds.data_hash)
    return manifest


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    ds = pipeline.load_dataset(cfg)
    manifest = _train(cfg, ds, out / "train", args.jobs)
    if manifest["failed"]:
        log.error("failed seeds: %s", ", ".join(manifest["failed"]))
    return 0 if len(manifest["failed"]) < len(manifest["scores"]) else 1


def _backtest(cfg: RunConfig, ds, train_root: Path, target: Path):
    res = pipeline.backtest(cfg, ds, train_root)
    with atomic_dir(target) as tmp:
        pipeline.write_backtest(res, ds, cfg, tmp)
    return res


def cmd_backtest(cfg: RunConfig, out: Path, args) -> int:
    ds = pipeline.load_dataset(cfg)
    _backtest(cfg, ds, out / "train", out / "backtest")
    return 0


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    """Train and backtest every ablation row; one metric row per ablation."""
    if not cfg.ablate:
        raise ConfigError("ablate needs at least one row in the 'ablate' section")
    ds = pipeline.load_dataset(cfg)
    root = out / "ablate"
    rows = {}
    for row in cfg.ablate:
        name = row["name"]
        sub = cfg.with_row(row)
        _train(sub, ds, root / name / "train", args.jobs)
        res = _backtest(sub, ds, root / name / "train", root / name / "backtest")
        rows[name] = res.strategies["deepm"].metrics
    write_metric_table(root / "metrics.csv", rows, {"config_hash": cfg.hash(), "data_hash": ds.data_hash})
    stamp(root, cfg, ds.data_hash, rows=[r["name"] for r in cfg.ablate])
    return 0


def cmd_verify(cfg: RunConfig, out: Path, args) -> int:
    results = run_checks()
    with atomic_dir(out / "verify") as tmp:
        write_results(tmp / "results.csv", results)
        stamp(tmp, cfg, None)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} {r.value:.3e} (threshold {r.threshold:.0e})")
    return 0 if all(r.passed for r in results) else 1


def cmd_report(cfg: RunConfig, out: Path, args) -> int:
    src = out / "backtest"
    if not (src / "metrics.csv").exists():
        raise FileNotFoundError(f"{src / 'metrics.csv'} not found; run 'backtest' first")
    with atomic_dir(out / "report") as tmp:
        md = pipeline.render_report(src, tmp)
        stamp(tmp, cfg, json.loads((src / "manifest.json").read_text())["data_hash"])
    print(md)
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepm", description="Structured deep portfolio manager: batch pipeline.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="YAML run configuration (defaults apply when omitted)")
    ap.add_argument("--out", type=Path, help="output root (default: $DEEPM_OUT or ./runs)")
    ap.add_argument("--seed", type=int, help="first model seed; the ensemble uses seed, seed+1, ...")
    ap.add_argument("--paper-scale", action="store_true", help="published model size, iterations and ensemble")
    ap.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = args.out if args.out is not None else pipeline.default_out_root()
    try:
        cfg = resolve(args)
        return HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
