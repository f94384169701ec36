"""Stage implementations shared by the command line and the experiment scripts:
dataset assembly, walk-forward training, backtesting and reports."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backtest import (
    BacktestReport,
    Metrics,
    compute_metrics,
    cost_bps,
    read_metric_table,
    simulate,
    write_daily_series,
    write_metric_table,
)
from .baselines import baseline_positions
from .config import RunConfig
from .data import PreparedData, PricePanel, load_prices, prepare, save_prices, synth_generate
from .graph import AssetMeta, MacroGraph, build_macro_graph, load_universe, save_universe, synthetic_universe
from .model import Structure, load_checkpoint, save_checkpoint
from .training import (
    Block,
    RunContext,
    SeedResult,
    SplitPlan,
    ensemble_select,
    mean_abs_turnover,
    test_positions,
    train_seed,
    walk_forward_plan,
)

log = logging.getLogger(__name__)

BPS = 1e-4


@dataclass
class Dataset:
    panel: PricePanel
    universe: list[AssetMeta]
    graph: MacroGraph
    data: PreparedData
    costs: np.ndarray
    structure: Structure
    data_hash: str

    @property
    def n_features(self) -> int:
        return self.data.features.n_features - 1


def panel_hash(panel: PricePanel) -> str:
    h = hashlib.sha256()
    h.update("|".join(panel.tickers).encode())
    h.update(panel.dates.astype("datetime64[D]").astype(np.int64).tobytes())
    h.update(np.nan_to_num(panel.close, nan=-1.0).astype("<f8").tobytes())
    h.update(panel.mask.astype(np.int8).tobytes())
    return h.hexdigest()[:16]


def universe_for(cfg: RunConfig, tickers: Sequence[str]) -> list[AssetMeta]:
    if cfg.data.source == "synth":
        spec = cfg.data.synth_spec()
        groups = list(spec.groups) if spec.groups else list(tickers)
        uni = synthetic_universe(groups, cost_bps=cfg.costs.synthetic_bps)
        return [AssetMeta(t, m.group, m.region, m.roles, m.struct_bps, m.liquidity_scalar, m.final_bps, m.close_rank)
                for t, m in zip(tickers, uni)]
    by_ticker = {m.ticker: m for m in load_universe(cfg.data.universe)}
    missing = [t for t in tickers if t not in by_ticker]
    if missing:
        raise ValueError(f"tickers without universe metadata: {missing}")
    return [by_ticker[t] for t in tickers]


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "synth":
        panel = synth_generate(cfg.data.synth_spec())
        universe = universe_for(cfg, panel.tickers)
        panel = PricePanel(panel.tickers, panel.dates, panel.close, panel.mask,
                           np.array([m.rank for m in universe], dtype=np.int64))
    else:
        ranks = {m.ticker: m.rank for m in load_universe(cfg.data.universe)}
        panel = load_prices(cfg.data.prices, close_rank=ranks)
        universe = universe_for(cfg, panel.tickers)
    data = prepare(panel, cfg.data.subset, cfg.data.vol_span)
    if cfg.costs.use_final_column:
        costs = np.array([m.final_bps for m in universe]) * BPS
    else:
        costs = np.array([cost_bps(m.struct_bps, m.liquidity_scalar, cfg.costs.floor_bps) for m in universe]) * BPS
    graph = build_macro_graph(universe)
    structure = Structure.from_graph(graph, [m.rank for m in universe])
    return Dataset(panel, universe, graph, data, costs, structure, panel_hash(panel))


def first_ready(data: PreparedData) -> int:
    ready = data.live.any(axis=0)
    if not ready.any():
        raise ValueError("no asset ever has complete features")
    return int(np.argmax(ready))


def make_plan(cfg: RunConfig, ds: Dataset) -> SplitPlan:
    return walk_forward_plan(ds.panel.dates, cfg.split.block_years, cfg.split.val_frac, first_ready(ds.data))


def run_context(cfg: RunConfig, ds: Dataset) -> RunContext:
    return RunContext(cfg.policy(ds.n_features, ds.panel.n_assets), ds.structure, ds.costs, cfg.loss)


# ------------------------------------------------------------------- train


def _ckpt_path(root: Path, block: int, seed: int) -> Path:
    return root / "checkpoints" / f"block{block:02d}" / f"seed{seed:04d}"


def _train_one(args) -> tuple[int, int, dict]:
    cfg, ds, b, block, seed, root = args
    ctx = run_context(cfg, ds)
    res = train_seed(seed, ds.data, ctx, cfg.train, block)
    meta = {
        "block": b, "seed": seed, "score": res.score, "failed": res.failed, "reason": res.reason,
        "iterations_run": res.iterations_run, "best_index": res.best_index, "history": res.history,
        "config_hash": cfg.hash(), "data_hash": ds.data_hash,
    }
    save_checkpoint(_ckpt_path(root, b, seed), res.params, ctx.model, meta)
    return b, seed, meta


def _load_meta(path: Path) -> dict | None:
    j = path.with_suffix(".json")
    return json.loads(j.read_text()) if j.exists() else None


def train_all(cfg: RunConfig, ds: Dataset, root: Path, jobs: int = 1) -> dict:
    """Train every (block, seed) pair, skipping checkpoints already on disk
    for the same config and data. Writes ``train_manifest.json``."""
    root = Path(root)
    plan = make_plan(cfg, ds)
    chash = cfg.hash()
    todo = []
    done: dict[tuple[int, int], dict] = {}
    for b, block in enumerate(plan.blocks):
        for seed in cfg.seed_list():
            meta = _load_meta(_ckpt_path(root, b, seed))
            if meta and meta.get("config_hash") == chash and meta.get("data_hash") == ds.data_hash:
                done[(b, seed)] = meta
            else:
                todo.append((cfg, ds, b, block, seed, root))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for b, seed, meta in ex.map(_train_one, todo):
                done[(b, seed)] = meta
    else:
        for item in todo:
            b, seed, meta = _train_one(item)
            done[(b, seed)] = meta
    manifest = {
        "config_hash": chash,
        "data_hash": ds.data_hash,
        "seeds": cfg.seed_list(),
        "blocks": [{"train": list(bl.train), "val": list(bl.val), "test": list(bl.test),
                    "test_dates": [str(ds.panel.dates[bl.test[0]]), str(ds.panel.dates[bl.test[1] - 1])]}
                   for bl in plan.blocks],
        "scores": {f"{b}:{s}": round(float(m["score"]), 12) for (b, s), m in sorted(done.items())},
        "failed": sorted(f"{b}:{s}" for (b, s), m in done.items() if m["failed"]),
    }
    (root / "train_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- backtest


@dataclass
class StrategyRun:
    positions: np.ndarray
    report: BacktestReport
    metrics: Metrics


@dataclass
class BacktestResult:
    window: tuple[int, int]
    strategies: dict[str, StrategyRun]
    ensemble_turnover: float
    member_turnover: list[float]
    members: dict[int, list[int]]


def ensemble_positions(cfg: RunConfig, ds: Dataset, root: Path) -> tuple[np.ndarray, list[np.ndarray], dict]:
    """Executed mean policy of the top-K seeds per block, plus each member's grid."""
    plan = make_plan(cfg, ds)
    shape = ds.data.targets.shape
    grid = np.zeros(shape)
    member_grids: list[np.ndarray] = []
    chosen: dict[int, list[int]] = {}
    for b, block in enumerate(plan.blocks):
        results = []
        loaded = {}
        for seed in cfg.seed_list():
            path = _ckpt_path(Path(root), b, seed)
            params, pcfg, meta = load_checkpoint(path)
            if meta["config_hash"] != cfg.hash() or meta["data_hash"] != ds.data_hash:
                raise ValueError(f"checkpoint {path} was produced by a different config or dataset")
            loaded[seed] = (params, pcfg)
            results.append(SeedResult(seed, params, meta["score"], meta["history"], [], meta["best_index"],
                                      meta["iterations_run"], meta["failed"], meta["reason"]))
        ens = ensemble_select(results, cfg.ensemble.top_k)
        chosen[b] = ens.seeds
        ctx = run_context(cfg, ds)
        per = [test_positions(loaded[s][0], ctx, ds.data, block, cfg.train) for s in ens.seeds]
        for k, pm in enumerate(per):
            if len(member_grids) <= k:
                member_grids.append(np.zeros(shape))
            member_grids[k] += pm
        grid += ens.positions(per)
    return grid, member_grids, chosen


def test_window(cfg: RunConfig, ds: Dataset) -> tuple[int, int]:
    plan = make_plan(cfg, ds)
    # the final decision date has no realized return
    return plan.blocks[0].test[0], min(plan.blocks[-1].test[1], ds.panel.n_days - 1)


def evaluate(ds: Dataset, positions: dict[str, np.ndarray], window: tuple[int, int],
             bench: str = "passive") -> dict[str, StrategyRun]:
    a, b = window
    d = ds.data
    live = d.live[:, a:b]
    reports = {k: simulate(p[:, a:b], d.targets[:, a:b], d.vol.sigma[:, a:b], ds.costs, live)
               for k, p in positions.items()}
    bench_net = reports[bench].net if bench in reports else None
    out = {}
    for k, rep in reports.items():
        m = compute_metrics(rep.net, bench_net, positions[k][:, a:b], live, gross=rep.gross)
        out[k] = StrategyRun(positions[k], rep, m)
    return out


def baseline_grid(cfg: RunConfig, ds: Dataset) -> dict[str, np.ndarray]:
    return {k: baseline_positions(ds.panel, ds.data.vol, cfg.baselines.config(k), exist=ds.data.live)
            for k in cfg.baselines.kinds}


def backtest(cfg: RunConfig, ds: Dataset, root: Path, model_name: str = "deepm") -> BacktestResult:
    window = test_window(cfg, ds)
    grid, members, chosen = ensemble_positions(cfg, ds, root)
    positions = {model_name: grid, **baseline_grid(cfg, ds)}
    if "passive" not in positions:
        positions["passive"] = baseline_positions(ds.panel, ds.data.vol, cfg.baselines.config("passive"),
                                                  exist=ds.data.live)
    runs = evaluate(ds, positions, window)
    a, b = window
    sig, live = ds.data.vol.sigma[:, a:b], ds.data.live[:, a:b]
    k = len(chosen[0]) if chosen else 1
    ens_to = mean_abs_turnover(grid[:, a:b], sig, live)
    mem_to = [mean_abs_turnover(m[:, a:b], sig, live) for m in members[:k]]
    return BacktestResult(window, runs, ens_to, mem_to, chosen)


def write_backtest(res: BacktestResult, ds: Dataset, cfg: RunConfig, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"config_hash": cfg.hash(), "data_hash": ds.data_hash}
    write_metric_table(out / "metrics.csv", {k: r.metrics for k, r in res.strategies.items()}, stamp)
    a, b = res.window
    dates = ds.panel.dates[a + 1:b + 1]
    series = out / "series"
    series.mkdir(exist_ok=True)
    for k, r in res.strategies.items():
        write_daily_series(series / f"{k}.csv", dates, r.report)
    with open(out / "positions.csv", "w") as fh:
        fh.write("date,ticker,strategy,position\n")
        for k, r in res.strategies.items():
            for t in range(a, b):
                for i, tk in enumerate(ds.panel.tickers):
                    fh.write(f"{np.datetime_as_string(ds.panel.dates[t], unit='D')},{tk},{k},{r.positions[i, t]!r}\n")
    manifest = {
        **stamp,
        "window": [str(ds.panel.dates[a]), str(ds.panel.dates[b - 1])],
        "ensemble_members": {str(k): v for k, v in res.members.items()},
        "ensemble_turnover": res.ensemble_turnover,
        "member_turnover": res.member_turnover,
        "artifacts": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ report


def render_report(bt_dir: Path, out: Path) -> str:
    """Markdown metric table plus plot-ready equity and turnover files."""
    bt_dir, out = Path(bt_dir), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = read_metric_table(bt_dir / "metrics.csv")
    cols = ["sr_gross", "sr_net", "t", "cagr", "calmar", "mdd", "hold", "ir", "t_alpha", "rho"]
    head = ["Strategy", "Gross SR", "Net SR", "t", "CAGR", "Calmar", "MDD", "Hold", "IR", "t_alpha", "rho"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, row in table.items():
        lines.append("| " + " | ".join([name] + [_short(row[c]) for c in cols]) + " |")
    any_row = next(iter(table.values()))
    md = "\n".join(lines) + f"\n\nconfig {any_row['config_hash']} / data {any_row['data_hash']}\n"
    (out / "report.md").write_text(md)
    (out / "metrics.csv").write_bytes((bt_dir / "metrics.csv").read_bytes())
    curves = {}
    for f in sorted((bt_dir / "series").glob("*.csv")):
        rows = np.genfromtxt(f, delimiter=",", names=True, dtype=None, encoding="utf-8")
        curves[f.stem] = rows
    names = sorted(curves)
    if names:
        dates = curves[names[0]]["date"]
        with open(out / "equity_curves.csv", "w") as fh:
            fh.write("date," + ",".join(names) + "\n")
            wealth = {k: np.cumprod(1.0 + np.atleast_1d(curves[k]["net"])) for k in names}
            for t, d in enumerate(np.atleast_1d(dates)):
                fh.write(d + "," + ",".join(f"{wealth[k][t]:.10f}" for k in names) + "\n")
    return md


def _short(v: str) -> str:
    try:
        x = float(v)
    except ValueError:
        return v
    if not np.isfinite(x):
        return v
    return f"{x:.2f}"


def default_out_root() -> Path:
    return Path(os.environ.get("DEEPM_OUT", "runs"))


def write_inputs(ds: Dataset, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_prices(ds.panel, out / "prices.csv")
    save_universe(ds.universe, out / "universe.csv")
    ds.graph.save_edges(out / "graph_edges.csv")
