"""Benchmark strategies that emit risk weights ``p`` under the same execution
contract as the learned policy: position ``p[i, t]`` is decided at the close
of ``t`` and notional is ``p / sigma``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import MACD_PAIRS, PricePanel, VolEstimate, macd

KINDS = ("passive", "tsmom", "macd", "risk_managed", "mvo", "mvo_tp", "erc")
PHI_NORM = 0.89


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "tsmom"
    base: str = "tsmom"  # signal fed to the portfolio constructions
    ridge: float = 1.0
    kappa: float = 10.0
    sigma_tgt: float = 1.0  # ex-ante daily std of sum_i p_i y_i in vol-scaled units
    cov_window: int = 252
    lookback: int = 252

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; choose from {KINDS}")
        if self.base not in ("tsmom", "macd"):
            raise ValueError(f"base signal must be tsmom or macd, got {self.base!r}")
        if self.ridge < 0 or self.kappa < 0:
            raise ValueError("ridge and kappa must be non-negative")
        if self.sigma_tgt <= 0:
            raise ValueError("sigma_tgt must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CovEstimate:
    cov: np.ndarray
    shrinkage: float
    n_obs: int


# ------------------------------------------------------------------ signals


def passive_equal_risk(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask, dtype=bool).astype(np.float64)


def tsmom_signal(close: np.ndarray, mask: np.ndarray, lookback: int = 252) -> np.ndarray:
    """``sign(P_t / P_{t-lookback} - 1)``; 0 without enough history."""
    close = np.asarray(close, dtype=np.float64)
    live = np.asarray(mask, dtype=bool)
    out = np.zeros(close.shape)
    if lookback < close.shape[1]:
        ok = live[:, lookback:] & live[:, :-lookback]
        with np.errstate(invalid="ignore", divide="ignore"):
            ret = close[:, lookback:] / np.where(ok, close[:, :-lookback], 1.0) - 1.0
        out[:, lookback:] = np.where(ok, np.sign(ret), 0.0)
    return out


def phi(x: np.ndarray) -> np.ndarray:
    """Reverting response ``x exp(-x^2/4) / 0.89``."""
    x = np.asarray(x, dtype=np.float64)
    return x * np.exp(-x * x / 4.0) / PHI_NORM


def macd_signal(close: np.ndarray, sigma: np.ndarray, mask: np.ndarray) -> np.ndarray:
    live = np.asarray(mask, dtype=bool)
    acc = np.zeros(close.shape)
    for s, l in MACD_PAIRS:
        v, ok = macd(close, sigma, live, s, l)
        acc += np.where(ok, phi(v), 0.0)
    return acc / len(MACD_PAIRS)


# --------------------------------------------------------------- covariance


def ledoit_wolf_cov(x: np.ndarray) -> CovEstimate:
    """Shrink the sample covariance of ``x [obs, asset]`` toward ``mu I``.

    Intensity follows the Ledoit-Wolf optimal formula with the sample
    covariance normalized by ``n``.
    """
    x = np.asarray(x, dtype=np.float64)
    n, p = x.shape
    if n < 2:
        raise ValueError("covariance window needs at least 2 observations")
    xc = x - x.mean(axis=0)
    s = xc.T @ xc / n
    mu = np.trace(s) / p
    target = mu * np.eye(p)
    delta = np.sum((s - target) ** 2) / p
    # average squared distance of the rank-one terms from s
    x2 = xc * xc
    beta = (np.sum(x2.T @ x2) / n - np.sum(s * s)) / (n * p)
    # beta >= 0 exactly; cancellation can leave a negative ulp
    shrink = 0.0 if delta <= 0 else min(max(beta, 0.0), delta) / delta
    cov = (1.0 - shrink) * s + shrink * target
    return CovEstimate(0.5 * (cov + cov.T), float(shrink), n)


def vol_scaled_returns(panel: PricePanel, vol: VolEstimate) -> tuple[np.ndarray, np.ndarray]:
    """``r_t / sigma_{t-1}`` with validity; used for covariance windows."""
    r = panel.returns()
    live = panel.mask.astype(bool)
    z = np.zeros_like(r)
    ok = np.zeros_like(live)
    ok[:, 1:] = live[:, 1:] & live[:, :-1] & vol.valid[:, :-1]
    z[:, 1:] = np.where(ok[:, 1:], r[:, 1:] / (vol.sigma[:, :-1] + vol.eps), 0.0)
    return z, ok


def rolling_cov(z: np.ndarray, ok: np.ndarray, t: int, idx: np.ndarray, window: int) -> CovEstimate | None:
    """Covariance of assets ``idx`` over the ``window`` dates ending at ``t``.

    Dates where any selected asset lacks a return are dropped.
    """
    lo = max(0, t - window + 1)
    blk = z[np.ix_(idx, np.arange(lo, t + 1))]
    good = ok[np.ix_(idx, np.arange(lo, t + 1))].all(axis=0)
    if good.sum() < 2:
        return None
    return ledoit_wolf_cov(blk[:, good].T)


# ------------------------------------------------------ portfolio construction


def risk_managed_scale(s: np.ndarray, cov: np.ndarray, sigma_tgt: float) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    l1 = np.abs(s).sum()
    if l1 == 0:
        return np.zeros_like(s)
    pt = s / l1
    v = float(pt @ cov @ pt)
    if v <= 0:
        return np.zeros_like(s)
    return sigma_tgt / np.sqrt(v) * pt


def mvo_direction(s: np.ndarray, cov: np.ndarray, ridge: float, kappa: float = 0.0,
                  p_prev: np.ndarray | None = None) -> np.ndarray:
    """Unscaled solution: ``(cov + ridge I)^-1 s`` or, with a turnover
    penalty, ``(cov + kappa I)^-1 (s + kappa p_prev)``."""
    n = len(s)
    if kappa > 0:
        rhs = s + kappa * (np.zeros(n) if p_prev is None else p_prev)
        return np.linalg.solve(cov + kappa * np.eye(n), rhs)
    return np.linalg.solve(cov + ridge * np.eye(n), s)


def mvo_allocate(s: np.ndarray, cov: np.ndarray, ridge: float, kappa: float,
                 p_prev: np.ndarray | None, sigma_tgt: float) -> np.ndarray:
    return risk_managed_scale(mvo_direction(s, cov, ridge, kappa, p_prev), cov, sigma_tgt)


@dataclass(frozen=True)
class ERCResult:
    q: np.ndarray
    iterations: int
    spread: float


def risk_contributions(q: np.ndarray, cov: np.ndarray) -> np.ndarray:
    vol = np.sqrt(q @ cov @ q)
    return q * (cov @ q) / vol


def erc_weights(cov: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> ERCResult:
    """Long-only equal-risk-contribution weights summing to one.

    Cyclic coordinate descent on ``q_i (cov q)_i = 1/n``; each coordinate
    update is the positive root of a quadratic.
    """
    cov = np.asarray(cov, dtype=np.float64)
    n = cov.shape[0]
    d = np.diag(cov)
    if np.any(d <= 0):
        raise ValueError("covariance needs a positive diagonal")
    q = 1.0 / np.sqrt(d)
    q /= q.sum()
    b = 1.0 / n
    spread = np.inf
    for it in range(1, max_iter + 1):
        for i in range(n):
            c = cov[i] @ q - d[i] * q[i]
            q[i] = (-c + np.sqrt(c * c + 4.0 * d[i] * b)) / (2.0 * d[i])
        qn = q / q.sum()
        rc = risk_contributions(qn, cov)
        spread = float(rc.max() - rc.min())
        if spread < tol:
            return ERCResult(qn, it, spread)
    return ERCResult(q / q.sum(), max_iter, spread)


def erc_allocate(s: np.ndarray, cov: np.ndarray, sigma_tgt: float | None = None) -> np.ndarray:
    """ERC magnitudes with the sign of ``s``; assets with ``s = 0`` get 0."""
    q = erc_weights(cov).q
    p = np.sign(s) * q
    if sigma_tgt is None:
        return p
    return risk_managed_scale(p, cov, sigma_tgt)


# ----------------------------------------------------------------- drivers


def base_signal(panel: PricePanel, vol: VolEstimate, cfg: BaselineConfig, kind: str | None = None) -> np.ndarray:
    kind = kind or cfg.base
    if kind == "tsmom":
        return tsmom_signal(panel.close, panel.mask, cfg.lookback)
    if kind == "macd":
        return macd_signal(panel.close, vol.sigma, panel.mask)
    raise ValueError(kind)


def baseline_positions(panel: PricePanel, vol: VolEstimate, cfg: BaselineConfig,
                       exist: np.ndarray | None = None) -> np.ndarray:
    """Risk weights ``[asset, date]`` for one benchmark.

    ``exist`` restricts trading to tradable dates (defaults to the price mask).
    Portfolio constructions use only dates up to and including ``t``.
    """
    live = panel.mask.astype(bool) if exist is None else np.asarray(exist, dtype=bool)
    if cfg.kind == "passive":
        return passive_equal_risk(live)
    if cfg.kind in ("tsmom", "macd"):
        return np.where(live, base_signal(panel, vol, cfg, cfg.kind), 0.0)
    sig = np.where(live, base_signal(panel, vol, cfg), 0.0)
    z, ok = vol_scaled_returns(panel, vol)
    n, t = sig.shape
    p = np.zeros((n, t))
    prev = np.zeros(n)
    for k in range(t):
        idx = np.flatnonzero(live[:, k])
        if idx.size == 0:
            prev = np.zeros(n)
            continue
        s = sig[idx, k]
        est = rolling_cov(z, ok, k, idx, cfg.cov_window)
        if est is None or not np.any(s):
            prev = np.zeros(n)
            continue
        cov = est.cov
        if cfg.kind == "risk_managed":
            pk = risk_managed_scale(s, cov, cfg.sigma_tgt)
        elif cfg.kind == "mvo":
            pk = mvo_allocate(s, cov, cfg.ridge, 0.0, None, cfg.sigma_tgt)
        elif cfg.kind == "mvo_tp":
            pk = mvo_allocate(s, cov, cfg.ridge, cfg.kappa, prev[idx], cfg.sigma_tgt)
        else:
            pk = erc_allocate(s, cov, cfg.sigma_tgt)
        p[idx, k] = pk
        prev = p[:, k].copy()
    return p


def save_signals(path, dates: np.ndarray, tickers, p: np.ndarray) -> None:
    """``date,ticker,position`` rows, date-major."""
    with open(path, "w") as fh:
        fh.write("date,ticker,position\n")
        for k, d in enumerate(dates):
            for i, tk in enumerate(tickers):
                fh.write(f"{np.datetime_as_string(d, unit='D')},{tk},{p[i, k]!r}\n")
