"""Execution of position streams under the linear cost model, and the
performance metric suite."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import AssetMeta

ANNUALIZATION = 252
COST_BANDS_BPS = (0.25, 0.5, 0.75, 1.0, 1.5, 2.5, 6.0, 15.0)
COST_FLOOR_BPS = 0.25
BPS = 1e-4


def cost_bps(struct_bps: float, liquidity_scalar: float, floor_bps: float = COST_FLOOR_BPS,
             bands: Sequence[float] = COST_BANDS_BPS) -> float:
    """``max(floor, struct * lambda)`` snapped to the nearest published band."""
    if struct_bps <= 0:
        raise ValueError("struct_bps must be positive")
    if liquidity_scalar < 0.5:
        raise ValueError("liquidity scalar below 0.5")
    raw = max(floor_bps, struct_bps * liquidity_scalar)
    if not bands:
        return raw
    b = np.asarray(bands, dtype=np.float64)
    return float(b[np.argmin(np.abs(b - raw))])


def asset_cost(meta: AssetMeta, floor_bps: float = COST_FLOOR_BPS,
               bands: Sequence[float] = COST_BANDS_BPS) -> float:
    """Per-unit-turnover cost as a decimal fraction."""
    return cost_bps(meta.struct_bps, meta.liquidity_scalar, floor_bps, bands) * BPS


def universe_costs(universe: Sequence[AssetMeta], override: bool = True) -> np.ndarray:
    """Decimal costs; with ``override`` the metadata's final column wins."""
    return np.array([m.final_bps * BPS if override else asset_cost(m) for m in universe])


# ---------------------------------------------------------------- simulate


@dataclass
class BacktestReport:
    """Daily series indexed by decision date ``t`` (return realized at ``t+1``)."""

    gross: np.ndarray
    cost: np.ndarray
    net: np.ndarray
    turnover: np.ndarray
    positions: np.ndarray
    notionals: np.ndarray
    n_live: np.ndarray


def simulate(p: np.ndarray, y: np.ndarray, sigma: np.ndarray, costs: np.ndarray, mask: np.ndarray,
             gamma_eval: float = 1.0, eps: float = 1e-8) -> BacktestReport:
    """Equal-weighted portfolio of vol-targeted positions.

    ``p, y, sigma, mask`` are ``[asset, date]``; ``y`` is the vol-scaled return
    earned from ``t`` to ``t+1``. The position held before the first date is
    zero. Days with no live asset have zero return.
    """
    p = np.asarray(p, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if np.any(p[~m] != 0):
        i, t = np.argwhere((p != 0) & ~m)[0]
        raise ValueError(f"non-zero position for masked asset {i} on date {t}")
    w = p / (sigma + eps)
    w = np.where(m, w, 0.0)
    dw = np.abs(np.diff(w, axis=1, prepend=0.0))
    n_live = m.sum(axis=0)
    denom = np.where(n_live > 0, n_live, 1)
    gross = np.where(n_live > 0, (np.where(m, p * y, 0.0)).sum(axis=0) / denom, 0.0)
    cost = np.where(n_live > 0, gamma_eval * (np.asarray(costs)[:, None] * dw).sum(axis=0) / denom, 0.0)
    turnover = np.where(n_live > 0, dw.sum(axis=0) / denom, 0.0)
    return BacktestReport(gross, cost, gross - cost, turnover, p, w, n_live)


def rescale_to_vol(r: np.ndarray, sigma_tgt: float = 0.10, annualization: int = ANNUALIZATION) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    sd = r.std(ddof=1) * math.sqrt(annualization)
    if not sd > 0:
        raise ValueError("cannot rescale a series with zero realized volatility")
    return r * (sigma_tgt / sd)


# ----------------------------------------------------------------- metrics


def sharpe(r: np.ndarray, annualization: int = ANNUALIZATION) -> float:
    r = np.asarray(r, dtype=np.float64)
    sd = r.std(ddof=1)
    return float(math.sqrt(annualization) * r.mean() / sd) if sd > 0 else 0.0


def cagr(r: np.ndarray, annualization: int = ANNUALIZATION) -> float:
    r = np.asarray(r, dtype=np.float64)
    growth = np.prod(1.0 + r)
    if growth <= 0:
        return -1.0
    return float(growth ** (annualization / len(r)) - 1.0)


def max_drawdown(r: np.ndarray) -> float:
    """Most negative ``P_t / max_{s<=t} P_s - 1`` with ``P_0 = 1``."""
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(r, dtype=np.float64))])
    return float(np.min(wealth / np.maximum.accumulate(wealth) - 1.0))


def newey_west_lags(n: int) -> int:
    return int(math.floor(4.0 * (n / 100.0) ** (2.0 / 9.0)))


def hac_tstat(r: np.ndarray, lags: int | None = None) -> float:
    """Mean over its Newey-West standard error (Bartlett kernel).

    The long-run variance carries the ``T/(T-1)`` small-sample factor, so at
    lag 0 this is the ordinary t-statistic. Returns NaN for a constant series.
    """
    x = np.asarray(r, dtype=np.float64)
    n = len(x)
    if n < 30:
        raise ValueError("HAC t-statistic needs at least 30 observations")
    lags = newey_west_lags(n) if lags is None else int(lags)
    e = x - x.mean()
    lrv = e @ e / n
    for lag in range(1, lags + 1):
        lrv += 2.0 * (1.0 - lag / (lags + 1.0)) * (e[lag:] @ e[:-lag]) / n
    lrv *= n / (n - 1.0)
    if not lrv > 0:
        return float("nan")
    return float(x.mean() / math.sqrt(lrv / n))


def holding_period(positions: np.ndarray, mask: np.ndarray, annualization: int = ANNUALIZATION) -> float:
    """``2 * 252 / (tau / avg GMV)`` with both terms averaged per live asset.

    ``tau`` is the annualized mean absolute day-over-day change within the
    sample; a position that never changes yields ``inf``.
    """
    p = np.where(mask, positions, 0.0)
    n_live = np.asarray(mask, dtype=bool).sum(axis=0)
    denom = np.where(n_live > 0, n_live, 1)
    dp = np.abs(np.diff(p, axis=1)).sum(axis=0) / denom[1:]
    tau = annualization * dp.mean() if dp.size else 0.0
    gmv = (np.abs(p).sum(axis=0) / denom).mean()
    if tau == 0:
        return float("inf")
    return float(2 * annualization * gmv / tau)


@dataclass
class Metrics:
    sr_gross: float
    sr_net: float
    t: float
    cagr: float
    calmar: float
    mdd: float
    hold: float
    ir: float
    t_alpha: float
    rho: float
    flags: tuple[str, ...] = field(default=())

    def row(self) -> dict:
        d = asdict(self)
        d["flags"] = ";".join(self.flags)
        return d


METRIC_COLUMNS = tuple(f.name for f in fields(Metrics))


def compute_metrics(net: np.ndarray, bench: np.ndarray | None, positions: np.ndarray, mask: np.ndarray,
                    gross: np.ndarray | None = None, sigma_tgt: float | None = 0.10,
                    annualization: int = ANNUALIZATION) -> Metrics:
    """Performance, risk, turnover and benchmark-relative metrics.

    Series are rescaled ex post to ``sigma_tgt`` annualized volatility before
    CAGR, drawdown and relative metrics; pass ``None`` to skip rescaling.
    Calmar with no drawdown is ``inf``; a zero tracking error gives IR 0.
    """
    net = np.asarray(net, dtype=np.float64)
    if len(net) < 2:
        raise ValueError("need at least 2 observations")
    flags: list[str] = []

    def scaled(x):
        if sigma_tgt is None:
            return x
        if not x.std(ddof=1) > 0:
            flags.append("zero_vol")
            return x
        return rescale_to_vol(x, sigma_tgt, annualization)

    rn = scaled(net)
    g = sharpe(gross, annualization) if gross is not None else float("nan")
    t = hac_tstat(rn) if len(rn) >= 30 else float("nan")
    c = cagr(rn, annualization)
    mdd = max_drawdown(rn)
    if mdd == 0:
        calmar = float("inf")
        flags.append("no_drawdown")
    else:
        calmar = c / abs(mdd)
    hold = holding_period(positions, mask, annualization)
    ir = t_alpha = rho = float("nan")
    if bench is not None:
        rb = scaled(np.asarray(bench, dtype=np.float64))
        spread = rn - rb
        if spread.std(ddof=1) > 0:
            ir = sharpe(spread, annualization)
            t_alpha = hac_tstat(spread) if len(spread) >= 30 else float("nan")
        else:
            ir, t_alpha = 0.0, 0.0
            flags.append("zero_tracking_error")
        if rn.std() > 0 and rb.std() > 0:
            rho = float(np.corrcoef(rn, rb)[0, 1])
    return Metrics(g, sharpe(rn, annualization), t, c, calmar, mdd, hold, ir, t_alpha, rho, tuple(flags))


# ----------------------------------------------------------------- reports


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6f}"
    return str(v)


def write_metric_table(path: str | Path, rows: dict[str, Metrics], extra: dict[str, str] | None = None) -> None:
    """One row per strategy, columns ``strategy`` then the metric fields.

    Floats are written with 6 decimals so reruns compare byte for byte.
    """
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", *METRIC_COLUMNS, *extra.keys()])
        for name, m in rows.items():
            r = m.row()
            w.writerow([name, *(_fmt(r[c]) for c in METRIC_COLUMNS), *extra.values()])


def read_metric_table(path: str | Path) -> dict[str, dict[str, str]]:
    with open(path, newline="") as fh:
        return {row["strategy"]: row for row in csv.DictReader(fh)}


def write_daily_series(path: str | Path, dates: np.ndarray, report: BacktestReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "gross", "cost", "net", "turnover", "n_live"])
        for k, d in enumerate(dates):
            w.writerow([np.datetime_as_string(d, unit="D"), repr(float(report.gross[k])), repr(float(report.cost[k])),
                        repr(float(report.net[k])), repr(float(report.turnover[k])), int(report.n_live[k])])
