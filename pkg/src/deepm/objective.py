"""Net-return accounting and the robust Sharpe objective.

The loss is ``-SR_pool - lam * mean_g SoftMin_tau({SR_{g,k}})`` where
``SR_pool`` pools every unmasked return of the logical batch and ``SR_{g,k}``
is the Sharpe ratio of sequence ``k`` in group ``g``. Because both terms are
functions of a handful of sums, the gradient with respect to each return is
available in closed form, which is what makes the exact two-pass
microbatching in :func:`two_pass_step` possible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tape, Tensor


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    lam: float = 0.1
    gamma: float = 0.5
    annualization: float = 252.0
    eps_sigma: float = 1e-8
    eps_var: float = 1e-12
    burn_in: int = 21

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")


# ---------------------------------------------------------------- net returns


def notional(p: np.ndarray, sigma: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return p / (sigma + eps)


def net_returns(
    p: np.ndarray,
    y: np.ndarray,
    sigma: np.ndarray,
    cost: np.ndarray,
    mask: np.ndarray,
    gamma: float,
    eps: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray]:
    """Portfolio net return per step.

    Arrays are ``[..., asset, time]``; ``cost`` is ``[asset]`` in decimal.
    ``p[..., t]`` is the risk weight held over ``t -> t+1`` and ``y[..., t]``
    the vol-scaled return earned over that interval. The position before the
    first step is taken as zero. Returns ``(R, empty)`` where ``empty`` flags
    steps with no live asset (``R = 0`` there).
    """
    m = np.asarray(mask, dtype=np.float64)
    n_live = m.sum(axis=-2)
    w = notional(p, sigma, eps)
    dw = np.abs(np.diff(w, axis=-1, prepend=0.0))
    c = np.asarray(cost, dtype=np.float64)[:, None]
    gross = (m * p * y).sum(axis=-2)
    tc = (m * c * dw).sum(axis=-2)
    empty = n_live == 0
    denom = np.where(empty, 1.0, n_live)
    r = np.where(empty, 0.0, (gross - gamma * tc) / denom)
    return r, empty


def net_returns_graph(
    tape: Tape,
    p: Tensor,
    y: np.ndarray,
    sigma: np.ndarray,
    cost: np.ndarray,
    mask: np.ndarray,
    gamma: float,
    eps: float = 1e-8,
) -> Tensor:
    """:func:`net_returns` on a tape, for ``p`` of shape ``[B, N, L]``."""
    m = np.asarray(mask, dtype=np.float64)
    n_live = m.sum(axis=-2)
    inv = np.where(n_live > 0, 1.0 / np.where(n_live > 0, n_live, 1.0), 0.0)
    gross = ad.tsum(ad.mul(p, m * y), axis=-2)
    if gamma == 0.0:
        return ad.mul(gross, inv)
    w = ad.mul(p, 1.0 / (sigma + eps))
    dw = ad.tabs(ad.sub(w, ad.shift_time(w, axis=-1)))
    tc = ad.tsum(ad.mul(dw, m * np.asarray(cost, dtype=np.float64)[:, None]), axis=-2)
    return ad.mul(ad.sub(gross, ad.mul(tc, gamma)), inv)


# ---------------------------------------------------------- scalar pieces


def _stats(r: np.ndarray, eps_var: float) -> tuple[float, float, float, bool]:
    n = r.size
    mu = r.sum() / n
    q = (r * r).sum() / n
    var = q - mu * mu
    clamped = var < eps_var
    return mu, q, math.sqrt(max(var, eps_var)), bool(clamped)


def pooled_sharpe(r: np.ndarray, loss_mask: np.ndarray | None = None, annualization: float = 252.0,
                  eps_sigma: float = 1e-8, eps_var: float = 1e-12) -> float:
    """``sqrt(A) * mu / (sigma + eps_sigma)`` over every unmasked entry."""
    r = np.asarray(r, dtype=np.float64)
    vals = r[np.asarray(loss_mask, dtype=bool)] if loss_mask is not None else r.ravel()
    if vals.size < 1:
        raise ValueError("pooled Sharpe needs at least one unmasked return")
    mu, _, sigma, _ = _stats(vals, eps_var)
    return math.sqrt(annualization) * mu / (sigma + eps_sigma)


def softmin(values: Sequence[float] | np.ndarray, tau: float) -> float:
    """``-tau * log(mean(exp(-v / tau)))`` evaluated with a min-shift."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    v = np.asarray(values, dtype=np.float64)
    lo = v.min()
    return float(lo - tau * np.log(np.mean(np.exp(-(v - lo) / tau))))


def adversarial_weights(sr: Sequence[float] | np.ndarray, tau: float) -> tuple[np.ndarray, float]:
    """Worst-case reweighting ``q* ∝ exp(-SR / tau)`` and ``KL(q* || uniform)``."""
    v = np.asarray(sr, dtype=np.float64)
    z = -(v - v.min()) / tau
    e = np.exp(z)
    q = e / e.sum()
    nz = q > 0
    kl = float(np.sum(q[nz] * np.log(q[nz] * v.size)))
    return q, kl


def entropic_aggregate(z: np.ndarray, tau: float, probs: np.ndarray | None = None) -> float:
    """``tau * log E_P[exp(Z / tau)]``."""
    z = np.asarray(z, dtype=np.float64)
    p = np.full(z.size, 1.0 / z.size) if probs is None else np.asarray(probs, dtype=np.float64)
    hi = z.max()
    return float(hi + tau * np.log(np.sum(p * np.exp((z - hi) / tau))))


def dv_objective(z: np.ndarray, q: np.ndarray, tau: float, probs: np.ndarray | None = None) -> float:
    """``E_Q[Z] - tau * KL(Q || P)``."""
    z = np.asarray(z, dtype=np.float64)
    p = np.full(z.size, 1.0 / z.size) if probs is None else np.asarray(probs, dtype=np.float64)
    nz = q > 0
    return float(np.sum(q * z) - tau * np.sum(q[nz] * np.log(q[nz] / p[nz])))


def tilted_weights(z: np.ndarray, tau: float, probs: np.ndarray | None = None) -> np.ndarray:
    """Maximizer of :func:`dv_objective`: ``q ∝ p * exp(Z / tau)``."""
    z = np.asarray(z, dtype=np.float64)
    p = np.full(z.size, 1.0 / z.size) if probs is None else np.asarray(probs, dtype=np.float64)
    e = p * np.exp((z - z.max()) / tau)
    return e / e.sum()


def evar(z: np.ndarray, alpha: float, probs: np.ndarray | None = None,
         bounds: tuple[float, float] = (1e-4, 1e4), tol: float = 1e-8) -> float:
    """Entropic value-at-risk ``inf_{lam>0} lam log E[e^{Z/lam}] - lam log(1 - alpha)``.

    The infimum is searched by golden section on ``log lam`` inside
    ``bounds``; the objective is convex in ``lam`` so it is unimodal there.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    z = np.asarray(z, dtype=np.float64)
    p = np.full(z.size, 1.0 / z.size) if probs is None else np.asarray(probs, dtype=np.float64)
    support = z[p > 0]
    if np.all(support == support[0]):
        return float(support[0])
    top = support.max()
    if p[z == top].sum() >= 1.0 - alpha:
        # the objective decreases to ess sup Z as lam -> 0 and never goes below it
        return float(top)
    f = lambda u: evar_objective(z, math.exp(u), alpha, p)  # noqa: E731
    a, b = math.log(bounds[0]), math.log(bounds[1])
    g = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return float(min(fc, fd, f(0.5 * (a + b))))


def evar_objective(z: np.ndarray, lam: float, alpha: float, probs: np.ndarray) -> float:
    hi = z.max()
    lse = hi / lam + math.log(float(np.sum(probs * np.exp((z - hi) / lam))))
    return lam * lse - lam * math.log(1.0 - alpha)


def turnover_cost(p: np.ndarray, v: np.ndarray, gamma: float = 1.0, start: str = "zero") -> float:
    """``gamma * sum_t |v_t * (p_t - p_{t-1})|_1`` over a ``[time, asset]`` path.

    ``start="zero"`` charges the initial entry from a flat book;
    ``start="given"`` treats ``p[0]`` as the inherited position.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if start == "zero":
        dp = np.diff(p, axis=0, prepend=np.zeros_like(p[:1]))
        vv = v
    elif start == "given":
        dp = np.diff(p, axis=0)
        vv = v[1:]
    else:
        raise ValueError("start must be 'zero' or 'given'")
    return float(gamma * np.sum(np.abs(vv * dp)))


# ------------------------------------------------------------ batch loss


def default_groups(n_sequences: int) -> np.ndarray:
    """All sequences in one SoftMin group."""
    return np.zeros(n_sequences, dtype=np.int64)


@dataclass
class SufficientStats:
    """Running sums of the pooled and per-sequence return moments.

    Sequences are identified by a global sample id; accumulation is pure
    summation, so microbatches can be added in any order.
    """

    s1: float = 0.0
    s2: float = 0.0
    n: int = 0
    per: dict[int, list] = field(default_factory=dict)
    group_of: dict[int, int] = field(default_factory=dict)

    def add(self, r: np.ndarray, loss_mask: np.ndarray, sample_ids: Sequence[int], groups: Sequence[int]) -> None:
        r = np.asarray(r, dtype=np.float64)
        m = np.asarray(loss_mask, dtype=bool)
        for row, sid, g in zip(range(r.shape[0]), sample_ids, groups):
            vals = r[row][m[row]]
            sid = int(sid)
            if sid in self.per:
                raise ValueError(f"sample id {sid} seen twice")
            self.per[sid] = [float(vals.sum()), float((vals * vals).sum()), int(vals.size)]
            self.group_of[sid] = int(g)
        rv = r[m]
        self.s1 += float(rv.sum())
        self.s2 += float((rv * rv).sum())
        self.n += int(rv.size)

    def finalize(self, cfg: LossConfig) -> "BatchStatistics":
        if self.n < 1:
            raise ValueError("all returns are masked")
        ids = sorted(self.per)
        return BatchStatistics.from_sums(
            self.s1, self.s2, self.n,
            np.array([self.per[i][0] for i in ids]), np.array([self.per[i][1] for i in ids]),
            np.array([self.per[i][2] for i in ids]), np.array([self.group_of[i] for i in ids]),
            np.array(ids), cfg,
        )


@dataclass
class BatchStatistics:
    """Derived moments, Sharpe ratios and SoftMin weights of one logical batch."""

    mu: float
    q: float
    sigma: float
    n: int
    clamped: bool
    sample_ids: np.ndarray
    mu_b: np.ndarray
    q_b: np.ndarray
    sigma_b: np.ndarray
    n_b: np.ndarray
    clamped_b: np.ndarray
    groups: np.ndarray
    sr_pool: float
    sr_b: np.ndarray
    q_star: np.ndarray
    softmin_g: dict[int, float]
    kl_g: dict[int, float]
    loss: float
    cfg: LossConfig

    @classmethod
    def from_sums(cls, s1, s2, n, s1_b, s2_b, n_b, groups, ids, cfg: LossConfig) -> "BatchStatistics":
        a = math.sqrt(cfg.annualization)
        mu, q = s1 / n, s2 / n
        var = q - mu * mu
        clamped = var < cfg.eps_var
        sigma = math.sqrt(max(var, cfg.eps_var))
        sr_pool = a * mu / (sigma + cfg.eps_sigma)
        if np.any(n_b < 1):
            raise ValueError("a sequence has no unmasked returns")
        mu_b, q_b = s1_b / n_b, s2_b / n_b
        var_b = q_b - mu_b * mu_b
        clamped_b = var_b < cfg.eps_var
        sigma_b = np.sqrt(np.maximum(var_b, cfg.eps_var))
        sr_b = a * mu_b / (sigma_b + cfg.eps_sigma)
        q_star = np.zeros_like(sr_b)
        softmin_g, kl_g = {}, {}
        for g in np.unique(groups):
            sel = groups == g
            q_star[sel], kl_g[int(g)] = adversarial_weights(sr_b[sel], cfg.tau)
            softmin_g[int(g)] = softmin(sr_b[sel], cfg.tau)
        loss = -sr_pool - cfg.lam * float(np.mean(list(softmin_g.values())))
        return cls(mu, q, sigma, n, bool(clamped), ids, mu_b, q_b, sigma_b, n_b, clamped_b, groups,
                   sr_pool, sr_b, q_star, softmin_g, kl_g, loss, cfg)

    def upstream(self, r: np.ndarray, loss_mask: np.ndarray, sample_ids: Sequence[int]) -> np.ndarray:
        """``dL/dR`` for the rows ``sample_ids`` of the batch."""
        cfg = self.cfg
        a = math.sqrt(cfg.annualization)
        r = np.asarray(r, dtype=np.float64)
        m = np.asarray(loss_mask, dtype=bool)
        es = cfg.eps_sigma
        # pooled Sharpe path
        g = np.full(r.shape, -a / (self.n * (self.sigma + es)))
        if not self.clamped:
            g = g + a * self.mu * (r - self.mu) / (self.n * (self.sigma + es) ** 2 * self.sigma)
        # SoftMin path
        if cfg.lam != 0.0:
            pos = {int(s): k for k, s in enumerate(self.sample_ids)}
            n_groups = len(self.softmin_g)
            for row, sid in enumerate(sample_ids):
                k = pos[int(sid)]
                mu_b, sig_b, n_b = self.mu_b[k], self.sigma_b[k], self.n_b[k]
                dsr = np.full(r.shape[1], a / (n_b * (sig_b + es)))
                if not self.clamped_b[k]:
                    dsr = dsr - a * mu_b * (r[row] - mu_b) / (n_b * (sig_b + es) ** 2 * sig_b)
                g[row] = g[row] + cfg.lam * (-self.q_star[k] / n_groups) * dsr
        return np.where(m, g, 0.0)


def batch_statistics(r: np.ndarray, loss_mask: np.ndarray, cfg: LossConfig,
                     groups: Sequence[int] | None = None) -> BatchStatistics:
    r = np.asarray(r, dtype=np.float64)
    groups = default_groups(r.shape[0]) if groups is None else np.asarray(groups)
    st = SufficientStats()
    st.add(r, loss_mask, range(r.shape[0]), groups)
    return st.finalize(cfg)


def total_loss(r: np.ndarray, loss_mask: np.ndarray, cfg: LossConfig, groups: Sequence[int] | None = None) -> float:
    return batch_statistics(r, loss_mask, cfg, groups).loss


def analytic_upstream_grad(r: np.ndarray, loss_mask: np.ndarray, cfg: LossConfig,
                           groups: Sequence[int] | None = None) -> np.ndarray:
    stats = batch_statistics(r, loss_mask, cfg, groups)
    return stats.upstream(r, loss_mask, range(np.asarray(r).shape[0]))


def burn_in_mask(batch: int, length: int, burn_in: int) -> np.ndarray:
    m = np.ones((batch, length), dtype=bool)
    m[:, :burn_in] = False
    return m


def total_loss_graph(tape: Tape, r: Tensor, loss_mask: np.ndarray, cfg: LossConfig,
                     groups: Sequence[int] | None = None) -> Tensor:
    """The same loss built from tape primitives (reference route for tests)."""
    m = np.asarray(loss_mask, dtype=np.float64)
    groups = default_groups(r.shape[0]) if groups is None else np.asarray(groups)
    a = math.sqrt(cfg.annualization)

    def sharpe(x_masked: Tensor, count, axis) -> Tensor:
        mu = ad.mul(ad.tsum(x_masked, axis=axis), 1.0 / count)
        q = ad.mul(ad.tsum(ad.square(x_masked), axis=axis), 1.0 / count)
        var = ad.clamp_min(ad.sub(q, ad.square(mu)), cfg.eps_var)
        return ad.mul(ad.div(mu, ad.add(ad.sqrt(var), cfg.eps_sigma)), a)

    rm = ad.mul(r, m)
    sr_pool = sharpe(rm, m.sum(), None)
    sr_b = sharpe(rm, m.sum(axis=1), 1)
    soft = []
    for g in np.unique(groups):
        idx = np.nonzero(groups == g)[0]
        sb = ad.getitem(sr_b, idx)
        shift = float(sb.value.min())
        e = ad.exp(ad.mul(ad.sub(sb, shift), -1.0 / cfg.tau))
        soft.append(ad.sub(shift, ad.mul(ad.log(ad.mean(e)), cfg.tau)))
    soft_mean = ad.mean(ad.stack(soft))
    return ad.sub(ad.mul(sr_pool, -1.0), ad.mul(soft_mean, cfg.lam))


# --------------------------------------------------------- two-pass step


@dataclass(frozen=True)
class Microbatch:
    """A slice of the logical batch with stable global sample ids."""

    sample_ids: tuple[int, ...]
    loss_mask: np.ndarray
    groups: tuple[int, ...]
    payload: object = None


@dataclass
class TwoPassResult:
    grads: dict[str, np.ndarray]
    stats: BatchStatistics
    returns: dict[int, np.ndarray]


def two_pass_step(
    forward: Callable[[Tape, Microbatch], Tensor],
    params: Params,
    microbatches: Sequence[Microbatch] | Callable[[], Sequence[Microbatch]],
    cfg: LossConfig,
    seed: int = 0,
    training: bool = True,
) -> TwoPassResult:
    """Exact gradient of the batch loss, one microbatch in memory at a time.

    Pass 1 runs every microbatch forward without recording and accumulates
    the sufficient statistics. Pass 2 re-runs each microbatch with
    recording, injects ``dL/dR`` computed from the global statistics and
    backpropagates. ``forward`` must return net returns ``[b, L]`` for the
    microbatch's rows in order. The tape seed is the same for every
    microbatch; stochastic layers key their randomness by sample id, so the
    result does not depend on how the batch is split.

    ``microbatches`` may be a callable; it is then invoked once per pass and
    both passes must produce the same composition.
    """
    get = microbatches if callable(microbatches) else (lambda: microbatches)

    stats_acc = SufficientStats()
    first = list(get())
    pass1: dict[int, np.ndarray] = {}
    for mb in first:
        tape = Tape(params, record=False, seed=seed, training=training)
        r = forward(tape, mb).value
        if r.shape != np.shape(mb.loss_mask):
            raise ValueError(f"forward returned {r.shape}, loss mask is {np.shape(mb.loss_mask)}")
        stats_acc.add(r, mb.loss_mask, mb.sample_ids, mb.groups)
        for row, sid in enumerate(mb.sample_ids):
            pass1[int(sid)] = r[row].copy()
    stats = stats_acc.finalize(cfg)

    second = list(get())
    if [mb.sample_ids for mb in second] != [mb.sample_ids for mb in first]:
        raise RuntimeError("microbatch composition differs between passes")
    params.zero_grad()
    for mb in second:
        tape = Tape(params, record=True, seed=seed, training=training)
        out = forward(tape, mb)
        for row, sid in enumerate(mb.sample_ids):
            if not np.array_equal(out.value[row], pass1[int(sid)]):
                raise RuntimeError(f"replay of sample {sid} differs from the statistics pass")
        g = stats.upstream(out.value, mb.loss_mask, mb.sample_ids)
        ad.backward(tape, out, g)
        tape.release()
    return TwoPassResult(params.grad_dict(), stats, pass1)


def split_batch(n: int, size: int, loss_mask: np.ndarray, groups: Sequence[int] | None = None,
                payload: Callable[[np.ndarray], object] | None = None) -> list[Microbatch]:
    """Consecutive microbatches of ``size`` rows (last may be shorter)."""
    groups = default_groups(n) if groups is None else np.asarray(groups)
    out = []
    for a in range(0, n, size):
        idx = np.arange(a, min(n, a + size))
        out.append(Microbatch(tuple(int(i) for i in idx), np.asarray(loss_mask)[idx],
                              tuple(int(g) for g in groups[idx]), payload(idx) if payload else None))
    return out


# ------------------------------------------------------------ diagnostics


def write_diagnostics(path: str | Path, step: int, stats: BatchStatistics, append: bool = True) -> None:
    """One row per sequence: step, sample id, group, SR_b, q*, group KL, clamp flags."""
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["step", "sample_id", "group", "sr_b", "q_star", "kl_group", "clamped_b", "clamped_pool",
                        "sr_pool", "loss"])
        for k, sid in enumerate(stats.sample_ids):
            g = int(stats.groups[k])
            w.writerow([step, int(sid), g, f"{stats.sr_b[k]:.12g}", f"{stats.q_star[k]:.12g}",
                        f"{stats.kl_g[g]:.12g}", int(stats.clamped_b[k]), int(stats.clamped),
                        f"{stats.sr_pool:.12g}", f"{stats.loss:.12g}"])
