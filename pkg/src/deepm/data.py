"""Price panels, volatility estimates and stationarized features.

Everything here works on ``[asset, date]`` arrays. All rolling quantities
look backwards only, so a value at date ``t`` never depends on prices after
``t``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

RETURN_HORIZONS = (1, 21, 63, 252)
MACD_PAIRS = ((8, 24), (16, 48), (32, 96))
ZSCORE_WINDOWS = (21, 252)
MACD_RENORM_WINDOW = 252
SUBSETS = ("RawMomentum", "SignalBased")


@dataclass(frozen=True)
class PricePanel:
    """Close prices on a common calendar.

    ``mask[i, t]`` is 1 from the asset's first observation onwards. Gaps after
    that are forward filled, so the mask is a contiguous suffix per asset and
    entries before the first observation hold NaN.
    """

    tickers: tuple[str, ...]
    dates: np.ndarray
    close: np.ndarray
    mask: np.ndarray
    close_rank: np.ndarray
    rejected: int = 0

    def __post_init__(self):
        n, t = self.close.shape
        if len(self.tickers) != n or len(set(self.tickers)) != n:
            raise ValueError("tickers must be unique and match close rows")
        if len(self.dates) != t:
            raise ValueError("dates must match close columns")
        if t > 1 and not np.all(np.diff(self.dates.astype("datetime64[D]").astype(np.int64)) > 0):
            raise ValueError("dates must be strictly increasing")
        if self.mask.shape != (n, t) or self.close_rank.shape != (n,):
            raise ValueError("mask/close_rank shape mismatch")
        live = self.mask.astype(bool)
        if not np.all(self.close[live] > 0):
            raise ValueError("close must be positive wherever mask is 1")
        first = first_valid_index(live)
        expected = np.arange(t)[None, :] >= first[:, None]
        if not np.array_equal(live, expected):
            raise ValueError("mask must be a contiguous suffix per asset")

    @property
    def n_assets(self) -> int:
        return self.close.shape[0]

    @property
    def n_days(self) -> int:
        return self.close.shape[1]

    def returns(self) -> np.ndarray:
        """Arithmetic returns ``P_t / P_{t-1} - 1``; 0 where undefined."""
        return simple_returns(self.close, self.mask)

    def select(self, idx: Sequence[int]) -> "PricePanel":
        idx = list(idx)
        return PricePanel(
            tuple(self.tickers[i] for i in idx), self.dates, self.close[idx], self.mask[idx],
            self.close_rank[idx], self.rejected,
        )

    def window(self, start: int, stop: int) -> "PricePanel":
        """Dates ``[start, stop)``; the mask is recomputed for the slice."""
        close = self.close[:, start:stop]
        mask = self.mask[:, start:stop]
        return PricePanel(self.tickers, self.dates[start:stop], close, mask, self.close_rank, self.rejected)


def first_valid_index(mask: np.ndarray) -> np.ndarray:
    """Index of the first True per row (row length if none)."""
    mask = np.asarray(mask, dtype=bool)
    has = mask.any(axis=1)
    return np.where(has, mask.argmax(axis=1), mask.shape[1])


def simple_returns(close: np.ndarray, mask: np.ndarray) -> np.ndarray:
    live = np.asarray(mask, dtype=bool)
    r = np.zeros_like(close, dtype=np.float64)
    ok = live[:, 1:] & live[:, :-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        r[:, 1:] = np.where(ok, close[:, 1:] / np.where(ok, close[:, :-1], 1.0) - 1.0, 0.0)
    return r


def load_prices(path: str | Path, close_rank: dict[str, int] | None = None) -> PricePanel:
    """Read a ``date,ticker,close`` file into an aligned panel.

    Rows with a non-positive or non-numeric close are dropped with a warning.
    An unparseable date raises ``ValueError``.
    """
    rows: dict[str, dict[np.datetime64, float]] = {}
    rejected = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames[:3]] != ["date", "ticker", "close"]:
            raise ValueError(f"{path}: header must be date,ticker,close")
        for lineno, row in enumerate(reader, start=2):
            try:
                d = np.datetime64(row["date"].strip(), "D")
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparseable date {row['date']!r}") from None
            try:
                px = float(row["close"])
            except (TypeError, ValueError):
                px = float("nan")
            if not np.isfinite(px) or px <= 0:
                rejected += 1
                warnings.warn(f"{path}:{lineno}: rejected non-positive price {row['close']!r} for {row['ticker']}")
                continue
            rows.setdefault(row["ticker"].strip(), {})[d] = px
    tickers = tuple(rows)
    dates = np.array(sorted({d for r in rows.values() for d in r}), dtype="datetime64[D]")
    pos = {d: k for k, d in enumerate(dates)}
    close = np.full((len(tickers), len(dates)), np.nan)
    for i, tk in enumerate(tickers):
        for d, px in rows[tk].items():
            close[i, pos[d]] = px
    close, mask = forward_fill(close)
    ranks = np.array([(close_rank or {}).get(tk, 0) for tk in tickers], dtype=np.int64)
    return PricePanel(tickers, dates, close, mask, ranks, rejected)


def forward_fill(close: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward fill gaps after each row's first observation.

    Returns the filled prices and the availability mask (1 from the first
    observation onwards).
    """
    obs = np.isfinite(close)
    n, t = close.shape
    idx = np.where(obs, np.arange(t)[None, :], -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    mask = (idx >= 0).astype(np.int8)
    filled = np.where(mask.astype(bool), close[np.arange(n)[:, None], np.maximum(idx, 0)], np.nan)
    return filled, mask


def save_prices(panel: PricePanel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "close"])
        for t, d in enumerate(panel.dates):
            for i, tk in enumerate(panel.tickers):
                if panel.mask[i, t]:
                    w.writerow([str(d), tk, repr(float(panel.close[i, t]))])


# ----------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class LeadLag:
    leader: int
    follower: int
    coupling: float


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic market.

    Daily log-returns mix a calm and a crisis regime (Markov switching) with
    a common factor, a slowly mean-reverting drift per asset that gives
    trend-followers something to find, and planted lead-lag pairs. A
    follower's shock at ``t`` loads on its leader's standardized shocks at
    ``t-1, ..., t-len(lag_weights)`` with weights ``coupling * lag_weights``.
    """

    n_assets: int = 6
    n_days: int = 4000
    seed: int = 0
    daily_vol: float = 0.01
    trend_persistence: float = 0.995
    trend_strength: float = 0.04
    crisis_enter: float = 0.004
    crisis_exit: float = 0.04
    crisis_vol_mult: float = 2.0
    calm_factor_loading: float = 0.2
    crisis_factor_loading: float = 0.6
    lead_lag: tuple[LeadLag, ...] = ()
    lag_weights: tuple[float, ...] = (1.0, 1.0)
    groups: tuple[str, ...] = ()
    start_days: tuple[int, ...] = ()
    start_date: str = "2000-01-03"

    def __post_init__(self):
        if self.n_assets < 2 or self.n_days < 300:
            raise ValueError("need n_assets >= 2 and n_days >= 300")
        for ll in self.lead_lag:
            if not (0 <= ll.leader < self.n_assets and 0 <= ll.follower < self.n_assets) or ll.leader == ll.follower:
                raise ValueError(f"bad lead-lag pair {ll}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["lead_lag"] = tuple(LeadLag(**x) if isinstance(x, dict) else LeadLag(*x) for x in d.get("lead_lag", ()))
        for k in ("lag_weights", "groups", "start_days"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def business_days(start: str, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward").astype("datetime64[D]")


def synth_generate(spec: SynthSpec) -> PricePanel:
    rng = np.random.default_rng(spec.seed)
    n, t = spec.n_assets, spec.n_days
    crisis = np.zeros(t, dtype=bool)
    u = rng.random(t)
    for k in range(1, t):
        crisis[k] = (u[k] >= spec.crisis_exit) if crisis[k - 1] else (u[k] < spec.crisis_enter)
    factor = rng.standard_normal(t)
    idio = rng.standard_normal((n, t))
    beta = np.where(crisis, spec.crisis_factor_loading, spec.calm_factor_loading)
    z = beta[None, :] * factor[None, :] + np.sqrt(1.0 - beta**2)[None, :] * idio

    shock = z.copy()
    for ll in spec.lead_lag:
        for lag, wgt in enumerate(spec.lag_weights, start=1):
            shock[ll.follower, lag:] += ll.coupling * wgt * z[ll.leader, :-lag]

    phi = spec.trend_persistence
    innov = rng.standard_normal((n, t)) * np.sqrt(1.0 - phi**2)
    drift = np.zeros((n, t))
    drift[:, 0] = rng.standard_normal(n)
    for k in range(1, t):
        drift[:, k] = phi * drift[:, k - 1] + innov[:, k]

    vol = spec.daily_vol * np.where(crisis, spec.crisis_vol_mult, 1.0)
    logret = vol[None, :] * (shock + spec.trend_strength * drift)
    logret[:, 0] = 0.0
    close = 100.0 * np.exp(np.cumsum(logret, axis=1))
    mask = np.ones((n, t), dtype=np.int8)
    for i, s in enumerate(spec.start_days):
        close[i, :s] = np.nan
        mask[i, :s] = 0
    tickers = tuple(f"A{i:02d}" for i in range(n))
    return PricePanel(tickers, business_days(spec.start_date, t), close, mask, np.zeros(n, dtype=np.int64))


# ----------------------------------------------------------------- volatility


@dataclass(frozen=True)
class VolEstimate:
    sigma: np.ndarray
    span: int
    eps: float
    valid: np.ndarray


def estimate_vol(panel: PricePanel, span: int = 63, eps: float = 1e-8) -> VolEstimate:
    """EWMA volatility of daily arithmetic returns, smoothing ``2/(span+1)``.

    The variance at ``t`` includes the return realized at ``t``. The first
    valid return seeds the recursion; an estimate is flagged valid once two
    returns have been seen. Dates before an asset starts are skipped.
    """
    if span < 2:
        raise ValueError("span must be >= 2")
    alpha = 2.0 / (span + 1.0)
    r = panel.returns()
    live = panel.mask.astype(bool)
    has_ret = np.zeros_like(live)
    has_ret[:, 1:] = live[:, 1:] & live[:, :-1]
    n, t = r.shape
    var = np.zeros((n, t))
    count = np.cumsum(has_ret, axis=1)
    cur = np.zeros(n)
    seen = np.zeros(n, dtype=bool)
    for k in range(t):
        hr = has_ret[:, k]
        r2 = r[:, k] * r[:, k]
        upd = np.where(seen, (1.0 - alpha) * cur + alpha * r2, r2)
        cur = np.where(hr, upd, cur)
        seen |= hr
        var[:, k] = cur
    sigma = np.maximum(np.sqrt(var), eps)
    valid = count >= 2
    sigma = np.where(valid, sigma, eps)
    return VolEstimate(sigma, span, eps, valid)


# ------------------------------------------------------------------- features


@dataclass(frozen=True)
class FeaturePanel:
    """``features[i, t, f]`` with the existence channel last.

    ``exist[i, t]`` is 1 when the asset trades at ``t`` and every feature has
    enough history; other entries are zeroed.
    """

    features: np.ndarray
    names: tuple[str, ...]
    subset: str
    exist: np.ndarray

    @property
    def n_features(self) -> int:
        return self.features.shape[2]


def feature_names(subset: str) -> tuple[str, ...]:
    if subset == "RawMomentum":
        names = [f"ret_{h}" for h in RETURN_HORIZONS]
    elif subset == "SignalBased":
        names = ["ret_1"] + [f"macd_{s}_{l}" for s, l in MACD_PAIRS]
    else:
        raise ValueError(f"unknown feature subset {subset!r}; expected one of {SUBSETS}")
    return tuple(names + [f"z_{w}" for w in ZSCORE_WINDOWS] + ["exist"])


def normalized_return(close: np.ndarray, sigma: np.ndarray, h: int, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """``(P_t/P_{t-h} - 1) / (sigma_t sqrt(h) + eps)`` and its validity."""
    n, t = close.shape
    out = np.zeros((n, t))
    ok = np.zeros((n, t), dtype=bool)
    if h < t:
        lagged = close[:, :-h]
        ok[:, h:] = np.isfinite(lagged) & np.isfinite(close[:, h:])
        with np.errstate(invalid="ignore"):
            raw = close[:, h:] / np.where(ok[:, h:], lagged, 1.0) - 1.0
        out[:, h:] = np.where(ok[:, h:], raw / (sigma[:, h:] * np.sqrt(h) + eps), 0.0)
    return out, ok


def ewm(x: np.ndarray, span: int, valid: np.ndarray) -> np.ndarray:
    """Causal EWMA with smoothing ``2/(span+1)`` seeded at the first valid value."""
    a = 2.0 / (span + 1.0)
    out = np.zeros_like(x, dtype=np.float64)
    cur = np.zeros(x.shape[0])
    seen = np.zeros(x.shape[0], dtype=bool)
    for k in range(x.shape[1]):
        v = valid[:, k]
        upd = np.where(seen, (1.0 - a) * cur + a * np.where(v, x[:, k], 0.0), np.where(v, x[:, k], 0.0))
        cur = np.where(v, upd, cur)
        seen |= v
        out[:, k] = cur
    return out


def rolling_std(x: np.ndarray, window: int, valid: np.ndarray, ddof: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window std; valid only where the full window is valid."""
    n, t = x.shape
    out = np.zeros((n, t))
    ok = np.zeros((n, t), dtype=bool)
    if window <= t:
        xs = sliding_window_view(np.where(valid, x, 0.0), window, axis=1)
        vs = sliding_window_view(valid, window, axis=1).all(axis=-1)
        out[:, window - 1:] = np.where(vs, xs.std(axis=-1, ddof=ddof), 0.0)
        ok[:, window - 1:] = vs
    return out, ok


def zscore(close: np.ndarray, valid: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Z-score of log price against its trailing ``window`` (sample std)."""
    n, t = close.shape
    lp = np.log(np.where(valid, close, 1.0))
    out = np.zeros((n, t))
    ok = np.zeros((n, t), dtype=bool)
    if window <= t:
        xs = sliding_window_view(lp, window, axis=1)
        vs = sliding_window_view(valid, window, axis=1).all(axis=-1)
        mu = xs.mean(axis=-1)
        sd = xs.std(axis=-1, ddof=1)
        cur = lp[:, window - 1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            z = np.where(sd > 0, (cur - mu) / np.where(sd > 0, sd, 1.0), 0.0)
        out[:, window - 1:] = np.where(vs, z, 0.0)
        ok[:, window - 1:] = vs
    return out, ok


def macd(close: np.ndarray, sigma: np.ndarray, valid: np.ndarray, short: int, long: int,
         renorm: int = MACD_RENORM_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Fast-minus-slow price EWMA over ``sigma * price``, then divided by its
    own trailing ``renorm``-day sample std."""
    px = np.where(valid, close, 0.0)
    raw = (ewm(px, short, valid) - ewm(px, long, valid)) / (sigma * np.where(valid, close, 1.0))
    n_seen = np.cumsum(valid, axis=1)
    raw_ok = n_seen >= long
    raw = np.where(raw_ok, raw, 0.0)
    sd, sd_ok = rolling_std(raw, renorm, raw_ok)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(sd_ok & (sd > 0), raw / np.where(sd > 0, sd, 1.0), 0.0)
    return out, sd_ok


def compute_features(
    panel: PricePanel,
    vol: VolEstimate,
    subset: str = "SignalBased",
    clip_window: int = 252,
    clip_k: float = 5.0,
    clip_scale: float = 1.48,
) -> FeaturePanel:
    names = feature_names(subset)
    close = panel.close
    live = panel.mask.astype(bool)
    sigma, eps = vol.sigma, vol.eps
    chans: list[np.ndarray] = []
    oks: list[np.ndarray] = []
    horizons = RETURN_HORIZONS if subset == "RawMomentum" else (1,)
    for h in horizons:
        v, ok = normalized_return(close, sigma, h, eps)
        chans.append(v)
        oks.append(ok & vol.valid)
    if subset == "SignalBased":
        for s, l in MACD_PAIRS:
            v, ok = macd(close, sigma, live, s, l)
            chans.append(v)
            oks.append(ok & vol.valid)
    for w in ZSCORE_WINDOWS:
        v, ok = zscore(close, live, w)
        chans.append(v)
        oks.append(ok)
    ready = live & np.logical_and.reduce(oks)
    feats = np.zeros(close.shape + (len(names),))
    for f, (v, ok) in enumerate(zip(chans, oks)):
        clipped = mad_clip(np.where(ok, v, np.nan), clip_window, clip_k, clip_scale)
        feats[:, :, f] = np.where(ready, np.nan_to_num(clipped, nan=0.0), 0.0)
    feats[:, :, -1] = ready
    return FeaturePanel(feats, names, subset, ready.astype(np.int8))


def mad_clip(series: np.ndarray, window: int = 252, k: float = 5.0, scale: float = 1.48,
             min_history: int = 10) -> np.ndarray:
    """Clip each value to ``median ± k * scale * MAD`` of the trailing window.

    The band at ``t`` is computed from the previous ``window`` *output*
    values, so applying the function twice gives the same result. NaN entries
    are ignored and passed through. With fewer than ``min_history`` values
    in the window, or MAD = 0, the value is passed through.
    """
    if window < 10:
        raise ValueError("window must be >= 10")
    x = np.asarray(series, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x[None, :]
    out = np.stack([_mad_clip_row(r, window, k * scale, min_history) for r in rows])
    return out.reshape(x.shape)


def _band_stats(hist: np.ndarray, min_history: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cnt = np.sum(np.isfinite(hist), axis=-1)
    ok = cnt >= min_history
    med = np.full(hist.shape[:-1], np.nan)
    mad = np.full(hist.shape[:-1], np.nan)
    if ok.any():
        h = hist[ok]
        if np.isfinite(h).all():
            m = np.median(h, axis=-1)
            d = np.median(np.abs(h - m[:, None]), axis=-1)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                m = np.nanmedian(h, axis=-1)
                d = np.nanmedian(np.abs(h - m[:, None]), axis=-1)
        med[ok], mad[ok] = m, d
    return med, mad, ok


def _mad_clip_row(x: np.ndarray, window: int, width: float, min_history: int) -> np.ndarray:
    # Bands are first computed from the raw input in bulk. They are exact for
    # every date whose trailing window contains no clipped value; dates
    # within `window` of a clip are recomputed from the output history.
    t = x.shape[0]
    padded = np.concatenate([np.full(window, np.nan), x])
    med = np.full(t, np.nan)
    mad = np.full(t, np.nan)
    chunk = 4096
    for a in range(0, t, chunk):
        b = min(t, a + chunk)
        hist = sliding_window_view(padded[a:b + window - 1], window)
        med[a:b], mad[a:b], _ = _band_stats(hist, min_history)
    out = x.copy()
    dirty_until = -1
    for i in range(t):
        v = x[i]
        if not np.isfinite(v):
            continue
        if i <= dirty_until:
            hist = out[max(0, i - window):i]
            m, d, ok = _band_stats(hist[None, :], min_history)
            m, d = (m[0], d[0]) if ok[0] else (np.nan, np.nan)
        else:
            m, d = med[i], mad[i]
        if not np.isfinite(m) or not d > 0:
            continue
        lo, hi = m - width * d, m + width * d
        if v < lo or v > hi:
            out[i] = lo if v < lo else hi
            dirty_until = i + window
    return out


# ------------------------------------------------------------------ targets


def next_day_targets(panel: PricePanel, vol: VolEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Vol-scaled next-day returns aligned to the decision date.

    ``y[i, t] = r_{i,t+1} / (sigma_{i,t} + eps)``; the returned mask is 1
    where that return exists. The last date has no target.
    """
    r = panel.returns()
    live = panel.mask.astype(bool)
    y = np.zeros_like(r)
    m = np.zeros_like(live)
    m[:, :-1] = live[:, 1:] & live[:, :-1]
    y[:, :-1] = np.where(m[:, :-1], r[:, 1:] / (vol.sigma[:, :-1] + vol.eps), 0.0)
    return y, m


# ------------------------------------------------------------ serialization


def save_features(fp: FeaturePanel, path: str | Path, extra: dict | None = None) -> None:
    """Write ``<path>.npy`` (float64 little-endian) plus ``<path>.json``."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), np.ascontiguousarray(fp.features, dtype="<f8"))
    manifest = {"names": list(fp.names), "shape": list(fp.features.shape), "subset": fp.subset, "dtype": "<f8"}
    manifest.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_features(path: str | Path) -> FeaturePanel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    feats = np.load(path.with_suffix(".npy"))
    if list(feats.shape) != manifest["shape"]:
        raise ValueError("feature dump does not match manifest shape")
    return FeaturePanel(feats, tuple(manifest["names"]), manifest["subset"], feats[:, :, -1].astype(np.int8))


@dataclass
class PreparedData:
    """Everything a model run needs, aligned on ``[asset, date]``."""

    panel: PricePanel
    vol: VolEstimate
    features: FeaturePanel
    targets: np.ndarray
    target_mask: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def live(self) -> np.ndarray:
        """Assets that are tradable at the decision date and have a target."""
        return self.features.exist.astype(bool) & self.target_mask


def prepare(panel: PricePanel, subset: str = "SignalBased", span: int = 63, eps: float = 1e-8) -> PreparedData:
    vol = estimate_vol(panel, span=span, eps=eps)
    fp = compute_features(panel, vol, subset)
    y, m = next_day_targets(panel, vol)
    return PreparedData(panel, vol, fp, y, m)
