"""Optimizer, early stopping, walk-forward splits, sequence batching,
per-seed training and top-K ensembling."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tape
from .data import PreparedData
from .model import PolicyConfig, PolicyInput, Structure, init_params, policy_forward
from .objective import LossConfig, Microbatch, net_returns, net_returns_graph, pooled_sharpe, two_pass_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; :meth:`paper_scale` restores the published grid point."""

    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    batch_size: int = 32
    microbatch_size: int = 8
    iterations: int = 300
    patience: int = 50
    ema_alpha: float = 0.45
    min_delta: float = 0.001
    stop_burn_in: int = 20
    eval_every: int = 1
    seq_len: int = 84
    burn_in: int = 21
    test_burn_in: int = 63
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "grad_clip_norm", "batch_size", "microbatch_size", "seq_len", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.iterations < 0:
            raise ValueError("weight_decay and iterations must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.ema_alpha <= 1:
            raise ValueError("ema_alpha must lie in (0, 1]")
        if self.seq_len <= max(self.burn_in, self.test_burn_in):
            raise ValueError("seq_len must exceed both burn-in lengths")

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        base = dict(learning_rate=1e-4, batch_size=64, iterations=1000, patience=50)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnsembleSpec:
    n_seeds: int = 8
    top_k: int = 4

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_seeds:
            raise ValueError("need 1 <= top_k <= n_seeds")

    @classmethod
    def paper_scale(cls) -> "EnsembleSpec":
        return cls(50, 25)


# --------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


def optimizer_step(params: Params, grads: dict[str, np.ndarray], cfg: TrainConfig, state: AdamState) -> bool:
    """AdamW with global-norm clipping. Returns False if the step was skipped
    because a gradient was not finite."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return False
    grads, _ = clip_global_norm(grads, cfg.grad_clip_norm)
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = cfg.learning_rate
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params.values[name]
        p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return True


# ----------------------------------------------------------- early stopping


@dataclass
class EarlyStopper:
    """Exponentially smoothed validation score with patience.

    Counting of non-improving evaluations starts after ``burn_in``
    evaluations; the first evaluation seeds the smoother.
    """

    alpha: float
    patience: int
    min_delta: float
    burn_in: int
    smoothed: list[float] = field(default_factory=list)
    best: float = -math.inf
    best_index: int = -1
    bad: int = 0
    stopped: bool = False

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "EarlyStopper":
        return cls(cfg.ema_alpha, cfg.patience, cfg.min_delta, cfg.stop_burn_in)

    def update(self, score: float) -> bool:
        """Record one evaluation; True means stop."""
        prev = self.smoothed[-1] if self.smoothed else score
        s = self.alpha * score + (1.0 - self.alpha) * prev
        self.smoothed.append(s)
        k = len(self.smoothed)
        if s > self.best + self.min_delta or self.best_index < 0:
            self.best, self.best_index, self.bad = s, k - 1, 0
        elif k > self.burn_in:
            self.bad += 1
        self.stopped = self.bad >= self.patience
        return self.stopped


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_index: int
    smoothed: tuple[float, ...]
    stopped_at: int | None


def ema_early_stop(history: Sequence[float], cfg: TrainConfig) -> StopDecision:
    """Replay a validation history through :class:`EarlyStopper`."""
    if not history:
        raise ValueError("need at least one evaluation")
    es = EarlyStopper.from_config(cfg)
    for k, s in enumerate(history):
        if es.update(float(s)):
            return StopDecision(True, es.best_index, tuple(es.smoothed), k + 1)
    return StopDecision(False, es.best_index, tuple(es.smoothed), None)


# ------------------------------------------------------------ walk-forward


@dataclass(frozen=True)
class Block:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]


@dataclass(frozen=True)
class SplitPlan:
    blocks: tuple[Block, ...]
    block_years: int
    val_frac: float


def _add_years(d: np.datetime64, years: int) -> np.datetime64:
    y = d.astype("datetime64[Y]")
    offset = d - y.astype("datetime64[D]")
    return (y + years).astype("datetime64[D]") + offset


def walk_forward_plan(dates: np.ndarray, block_years: int = 5, val_frac: float = 0.1,
                      first_train: int = 0) -> SplitPlan:
    """Expanding-window blocks of ``block_years`` calendar years.

    Block ``k`` trains on every date before its test window and holds out the
    final ``val_frac`` of that range for validation. The last test window may
    be shorter than ``block_years``. ``first_train`` skips warm-up dates.
    """
    dates = np.asarray(dates).astype("datetime64[D]")
    if not 0 < val_frac < 1:
        raise ValueError("val_frac must lie in (0, 1)")
    start = dates[first_train]
    edges = [first_train]
    k = 1
    while True:
        edge = int(np.searchsorted(dates, _add_years(start, k * block_years)))
        if edge >= len(dates):
            break
        edges.append(edge)
        k += 1
    if len(edges) < 2:
        raise ValueError(f"need more than {block_years} years after the warm-up to form one train and one "
                         f"test block; have {(dates[-1] - start).astype(int) / 365.25:.2f}")
    edges.append(len(dates))
    blocks = []
    for b in range(1, len(edges) - 1):
        tr_end = edges[b]
        n_train = tr_end - first_train
        n_val = max(1, int(round(val_frac * n_train)))
        blocks.append(Block((first_train, tr_end - n_val), (tr_end - n_val, tr_end), (tr_end, edges[b + 1])))
    return SplitPlan(tuple(blocks), block_years, val_frac)


# --------------------------------------------------------------- sequences


@dataclass(frozen=True)
class SequenceSet:
    starts: np.ndarray      # [S]
    loss_mask: np.ndarray   # [S, L] bool
    seq_len: int

    def __len__(self) -> int:
        return len(self.starts)


def make_sequences(start: int, stop: int, seq_len: int = 84, burn_in: int = 21, tail: bool = False,
                   context_floor: int | None = None) -> SequenceSet:
    """Sequences whose unmasked steps tile ``[start, stop)`` without overlap.

    Each sequence spends its first ``burn_in`` steps as context. By default the
    context must lie inside the range; ``context_floor`` lets it reach back to
    that date (used at test time, where earlier features are already known).
    With ``tail`` a final sequence is aligned to ``stop`` so every date is
    covered exactly once; its mask skips steps covered earlier.
    """
    if seq_len <= burn_in:
        raise ValueError("seq_len must exceed burn_in")
    floor = start if context_floor is None else context_floor
    first = max(floor, start - burn_in)
    lead = start - first  # context steps available before `start`
    stride = seq_len - burn_in
    starts, masks = [], []
    cover = first + max(burn_in, lead)
    s = cover - burn_in
    while s + seq_len <= stop:
        m = np.zeros(seq_len, dtype=bool)
        m[burn_in:] = True
        starts.append(s)
        masks.append(m)
        s += stride
    covered = s + burn_in
    if tail and covered < stop and stop - seq_len >= floor:
        s = stop - seq_len
        m = np.zeros(seq_len, dtype=bool)
        m[max(burn_in, covered - s):] = True
        starts.append(s)
        masks.append(m)
    if not starts:
        warnings.warn(f"range [{start}, {stop}) is shorter than one sequence of {seq_len}; skipped")
        return SequenceSet(np.zeros(0, dtype=np.int64), np.zeros((0, seq_len), dtype=bool), seq_len)
    return SequenceSet(np.array(starts, dtype=np.int64), np.array(masks), seq_len)


@dataclass
class SequenceBatch:
    """Dense arrays for a set of sequences, asset axis before time."""

    x: np.ndarray          # [S, N, L, F]
    exist: np.ndarray      # [S, N, L]
    y: np.ndarray          # [S, N, L]
    sigma: np.ndarray      # [S, N, L]
    live: np.ndarray       # [S, N, L]
    loss_mask: np.ndarray  # [S, L]
    starts: np.ndarray

    def rows(self, idx) -> "SequenceBatch":
        idx = np.asarray(idx)
        return SequenceBatch(self.x[idx], self.exist[idx], self.y[idx], self.sigma[idx], self.live[idx],
                             self.loss_mask[idx], self.starts[idx])


def gather(data: PreparedData, seqs: SequenceSet) -> SequenceBatch:
    feats = data.features.features[..., :-1]
    live = data.live
    exist = data.features.exist.astype(np.float64)
    windows = [np.arange(s, s + seqs.seq_len) for s in seqs.starts]
    pick = (lambda a: np.stack([a[:, w] for w in windows])) if windows else (
        lambda a: np.zeros((0, a.shape[0], seqs.seq_len) + a.shape[2:]))
    lv = pick(live).astype(bool)
    # steps with no live asset contribute nothing to the loss
    lm = seqs.loss_mask & lv.any(axis=1) if len(seqs) else seqs.loss_mask.copy()
    return SequenceBatch(pick(feats), pick(exist), pick(data.targets), pick(data.vol.sigma), lv, lm, seqs.starts)


def drop_empty(batch: SequenceBatch) -> SequenceBatch:
    keep = np.flatnonzero(batch.loss_mask.any(axis=1))
    return batch.rows(keep)


# ----------------------------------------------------------- model plumbing


@dataclass(frozen=True)
class RunContext:
    """Everything fixed for one model: architecture, graph, costs, loss."""

    model: PolicyConfig
    structure: Structure
    costs: np.ndarray
    loss: LossConfig
    eps: float = 1e-8


def policy_input(batch: SequenceBatch, costs: np.ndarray, sample_ids: Sequence[int]) -> PolicyInput:
    n = batch.x.shape[1]
    return PolicyInput(batch.x, batch.exist, np.arange(n), costs * 1e4, tuple(int(s) for s in sample_ids))


def forward_returns(tape: Tape, ctx: RunContext, batch: SequenceBatch, sample_ids: Sequence[int],
                    gamma: float | None = None):
    inp = policy_input(batch, ctx.costs, sample_ids)
    p = policy_forward(tape, ctx.model, inp, ctx.structure)
    g = ctx.loss.gamma if gamma is None else gamma
    return net_returns_graph(tape, p, batch.y, batch.sigma, ctx.costs, batch.live, g, ctx.eps)


def predict_positions(params: Params, ctx: RunContext, batch: SequenceBatch, chunk: int = 8) -> np.ndarray:
    out = []
    for a in range(0, len(batch.starts), chunk):
        sub = batch.rows(np.arange(a, min(len(batch.starts), a + chunk)))
        tape = Tape(params, record=False, training=False)
        inp = policy_input(sub, ctx.costs, range(a, a + len(sub.starts)))
        out.append(policy_forward(tape, ctx.model, inp, ctx.structure).value)
    if not out:
        return np.zeros((0,) + batch.y.shape[1:])
    return np.concatenate(out)


def validation_sharpe(params: Params, ctx: RunContext, batch: SequenceBatch) -> float:
    """Pooled net Sharpe (training gamma) over the unmasked validation steps."""
    p = predict_positions(params, ctx, batch)
    r, _ = net_returns(p, batch.y, batch.sigma, ctx.costs, batch.live, ctx.loss.gamma, ctx.eps)
    return pooled_sharpe(r, batch.loss_mask, ctx.loss.annualization)


def stitch_positions(p_seq: np.ndarray, batch: SequenceBatch, shape: tuple[int, int]) -> np.ndarray:
    """Place per-sequence positions on the ``[asset, date]`` grid at masked steps."""
    out = np.zeros(shape)
    for k, s in enumerate(batch.starts):
        steps = np.flatnonzero(batch.loss_mask[k])
        out[:, s + steps] = p_seq[k][:, steps]
    return out


def test_positions(params: Params, ctx: RunContext, data: PreparedData, block: Block, cfg: TrainConfig) -> np.ndarray:
    """Out-of-sample risk weights on ``[asset, date]``, zero outside the test range."""
    seqs = make_sequences(block.test[0], block.test[1], cfg.seq_len, cfg.test_burn_in, tail=True, context_floor=0)
    batch = gather(data, seqs)
    p = predict_positions(params, ctx, batch)
    grid = stitch_positions(p, batch, data.targets.shape)
    return np.where(data.live, grid, 0.0)


# ------------------------------------------------------------------ train


def iteration_seed(seed: int, it: int) -> int:
    return int(np.random.SeedSequence([seed, it]).generate_state(1)[0])


@dataclass
class SeedResult:
    seed: int
    params: Params
    score: float
    history: list[float]
    smoothed: list[float]
    best_index: int
    iterations_run: int
    failed: bool = False
    reason: str = ""
    skipped_steps: int = 0


def train_seed(seed: int, data: PreparedData, ctx: RunContext, cfg: TrainConfig, block: Block,
               diagnostics=None) -> SeedResult:
    """Fit one model on ``block.train`` and early-stop on ``block.val``.

    Initialization, batch order and dropout are all derived from ``seed``.
    The returned parameters are those at the best smoothed validation score.
    """
    params = init_params(ctx.model, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    train = drop_empty(gather(data, make_sequences(*block.train, cfg.seq_len, cfg.burn_in)))
    val = drop_empty(gather(data, make_sequences(*block.val, cfg.seq_len, cfg.burn_in, context_floor=block.train[0])))
    if len(train.starts) == 0 or len(val.starts) == 0:
        raise ValueError("no usable training or validation sequences")
    stopper = EarlyStopper.from_config(cfg)
    state = AdamState()
    best = params.copy()
    history: list[float] = []

    def evaluate() -> bool:
        nonlocal best
        s = validation_sharpe(params, ctx, val)
        history.append(s)
        stop = stopper.update(s)
        if stopper.best_index == len(history) - 1:
            best = params.copy()
        return stop

    evaluate()
    it = 0
    try:
        for it in range(1, cfg.iterations + 1):
            size = min(cfg.batch_size, len(train.starts))
            idx = np.sort(rng.choice(len(train.starts), size=size, replace=False))
            mbs = []
            for a in range(0, size, cfg.microbatch_size):
                rows = idx[a:a + cfg.microbatch_size]
                sub = train.rows(rows)
                mbs.append(Microbatch(tuple(int(r) for r in rows), sub.loss_mask, (0,) * len(rows), sub))
            res = two_pass_step(
                lambda tape, mb: forward_returns(tape, ctx, mb.payload, mb.sample_ids),
                params, mbs, ctx.loss, seed=iteration_seed(seed, it),
            )
            if diagnostics is not None:
                diagnostics(it, res.stats)
            optimizer_step(params, res.grads, cfg, state)
            if it % cfg.eval_every == 0 and evaluate():
                break
    except FloatingPointError as exc:
        log.warning("seed %d diverged at iteration %d: %s", seed, it, exc)
        return SeedResult(seed, best, -math.inf, history, list(stopper.smoothed), stopper.best_index, it,
                          True, str(exc), state.skipped)
    return SeedResult(seed, best, stopper.best, history, list(stopper.smoothed), stopper.best_index, it,
                      skipped_steps=state.skipped)


# --------------------------------------------------------------- ensemble


@dataclass
class Ensemble:
    members: list[SeedResult]

    @property
    def seeds(self) -> list[int]:
        return [m.seed for m in self.members]

    def positions(self, per_member: Sequence[np.ndarray]) -> np.ndarray:
        """Executed mean policy: average of member risk weights."""
        return np.mean(np.stack(per_member), axis=0)


def ensemble_select(results: Sequence[SeedResult], top_k: int) -> Ensemble:
    ok = [r for r in results if not r.failed]
    if len(ok) < top_k:
        warnings.warn(f"only {len(ok)} successful seeds for top_k={top_k}; using all")
        top_k = len(ok)
    if top_k == 0:
        raise ValueError("no successful seeds")
    ranked = sorted(ok, key=lambda r: (-r.score, r.seed))
    return Ensemble(ranked[:top_k])


def mean_abs_turnover(p: np.ndarray, sigma: np.ndarray, mask: np.ndarray, eps: float = 1e-8) -> float:
    """Mean over days of the summed absolute notional change."""
    w = np.where(mask, p / (sigma + eps), 0.0)
    return float(np.abs(np.diff(w, axis=1, prepend=0.0)).sum(axis=0).mean())


def with_gamma(ctx: RunContext, gamma: float) -> RunContext:
    return replace(ctx, loss=replace(ctx.loss, gamma=gamma))
