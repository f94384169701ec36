"""The policy network: temporal encoder, cross-sectional attention, macro
graph layer and the bounded action head.

Activations are laid out ``[batch, asset, time, channel]``. The temporal
encoder is shared across assets and never mixes them; cross-asset
information enters only through the spatial blocks, whose keys and values
come from a delayed context so that a decision at ``t`` cannot see another
market's close at ``t`` unless the protocol explicitly allows it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tape, Tensor
from .graph import MacroGraph

PROTOCOLS = ("directed_delay", "cascading")
GRAPH_MODES = ("gat", "gcn", "none")
BLOCK_ORDERS = ("cross_then_graph", "graph_then_cross")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    n_features: int
    n_assets: int
    d_model: int = 64
    heads: int = 4
    dropout: float = 0.3
    protocol: str = "directed_delay"
    graph_mode: str = "gat"
    cross_attn: bool = True
    block_order: str = "cross_then_graph"
    rezero: bool = True
    adapter_hidden: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.graph_mode not in GRAPH_MODES:
            raise ValueError(f"graph_mode must be one of {GRAPH_MODES}")
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_features < 1 or self.n_assets < 1:
            raise ValueError("n_features and n_assets must be positive")

    @property
    def hidden(self) -> int:
        return self.adapter_hidden or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(cfg: PolicyConfig) -> int:
    """Closed-form parameter count.

    With ``d = d_model``, ``h = adapter hidden``, ``F`` features, ``N`` assets
    and ``r = 1`` if ReZero is on::

        static    N d + (d + 1) d + d
        vsn       2 (d F + F) + F^2 + F + 2 F d
        lstm      8 d^2 + 4 d + 2 (d^2 + d)
        adapter   3 d h + 2 h + 3 d            (x2, +1 per spatial block)
        temporal  4 (d^2 + d)
        cross     4 (d^2 + d) + 2 d + r        (if on)
        gat       3 d^2 + 2 d + r | gcn d^2 + 2 d + r
        head      d + 1
    """
    d, h, f, n = cfg.d_model, cfg.hidden, cfg.n_features, cfg.n_assets
    r = 1 if cfg.rezero else 0
    adapter = 3 * d * h + 2 * h + 3 * d
    total = n * d + (d + 1) * d + d
    total += 2 * (d * f + f) + f * f + f + 2 * f * d
    total += 8 * d * d + 4 * d + 2 * (d * d + d)
    total += 2 * adapter + 4 * (d * d + d)
    if cfg.cross_attn:
        total += 4 * (d * d + d) + 2 * d + r + adapter
    if cfg.graph_mode == "gat":
        total += 3 * d * d + 2 * d + r + adapter
    elif cfg.graph_mode == "gcn":
        total += d * d + 2 * d + r + adapter
    return total + d + 1


def init_params(cfg: PolicyConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d, h, f, n = cfg.d_model, cfg.hidden, cfg.n_features, cfg.n_assets
    p = Params()

    def w(name, fan_in, fan_out, scale=1.0):
        p.add(name, rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out)))

    def z(name, *shape):
        p.add(name, np.zeros(shape))

    p.add("emb", rng.normal(0.0, 1.0 / math.sqrt(d), size=(n, d)))
    w("ctx_w", d + 1, d)
    z("ctx_b", d)
    w("film_g_w", d, f, 0.1)
    z("film_g_b", f)
    w("film_b_w", d, f, 0.1)
    z("film_b_b", f)
    w("gate_w", f, f)
    z("gate_b", f)
    p.add("conv_w", rng.normal(0.0, 1.0, size=(f, d)))
    z("conv_b", f, d)
    w("lstm_wx", d, 4 * d)
    lstm_b = np.zeros(4 * d)
    lstm_b[d:2 * d] = 1.0
    p.add("lstm_b", lstm_b)
    w("lstm_wh", d, 4 * d)
    w("init_h_w", d, d)
    z("init_h_b", d)
    w("init_c_w", d, d)
    z("init_c_b", d)

    def adapter(prefix):
        w(f"{prefix}_w1", d, h)
        z(f"{prefix}_b1", h)
        w(f"{prefix}_v", d, h)
        z(f"{prefix}_bv", h)
        w(f"{prefix}_w2", h, d)
        z(f"{prefix}_b2", d)
        p.add(f"{prefix}_ln_g", np.ones(d))
        z(f"{prefix}_ln_b", d)

    def mha(prefix):
        for k in "qkvo":
            w(f"{prefix}_{k}_w", d, d)
            z(f"{prefix}_{k}_b", d)

    adapter("adp_lstm")
    mha("tmp")
    adapter("adp_temp")
    if cfg.cross_attn:
        mha("x")
        p.add("x_ln_g", np.ones(d))
        z("x_ln_b", d)
        if cfg.rezero:
            z("x_alpha")
        adapter("adp_cross")
    if cfg.graph_mode != "none":
        if cfg.graph_mode == "gat":
            w("g_q", d, d)
            w("g_k", d, d)
        w("g_w", d, d)
        p.add("g_ln_g", np.ones(d))
        z("g_ln_b", d)
        if cfg.rezero:
            z("g_alpha")
        adapter("adp_gnn")
    w("head_w", d, 1)
    z("head_b", 1)
    return p


@dataclass(frozen=True)
class Structure:
    """Graph and close-order information aligned with the batch's asset axis."""

    log_bias: np.ndarray
    gcn_weights: np.ndarray
    close_rank: np.ndarray

    @classmethod
    def from_graph(cls, graph: MacroGraph, close_rank: Sequence[int] | None = None) -> "Structure":
        rank = np.zeros(graph.n, dtype=np.int64) if close_rank is None else np.asarray(close_rank, dtype=np.int64)
        return cls(graph.log_bias(), graph.gcn_weights(), rank)

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray, close_rank: Sequence[int] | None = None) -> "Structure":
        return cls.from_graph(MacroGraph(tuple(str(i) for i in range(len(adjacency))), np.asarray(adjacency, float)),
                              close_rank)

    def same_day(self) -> np.ndarray:
        """``S[i, j] = 1`` when ``j`` closes strictly before ``i``."""
        r = self.close_rank
        return (r[None, :] < r[:, None]).astype(np.float64)

    def permute(self, perm: Sequence[int]) -> "Structure":
        perm = np.asarray(perm)
        return Structure(self.log_bias[np.ix_(perm, perm)], self.gcn_weights[np.ix_(perm, perm)],
                         self.close_rank[perm])


@dataclass
class PolicyInput:
    """One batch: features ``x [B, N, L, F]``, existence ``[B, N, L]``,
    embedding rows per asset slot, costs in bps and global sample ids."""

    x: np.ndarray
    exist: np.ndarray
    asset_idx: np.ndarray
    cost_bps: np.ndarray
    sample_ids: tuple[int, ...]

    def rows(self, idx: Sequence[int]) -> "PolicyInput":
        idx = list(idx)
        return PolicyInput(self.x[idx], self.exist[idx], self.asset_idx, self.cost_bps,
                           tuple(self.sample_ids[i] for i in idx))

    def permute_assets(self, perm: Sequence[int]) -> "PolicyInput":
        perm = np.asarray(perm)
        return PolicyInput(self.x[:, perm], self.exist[:, perm], self.asset_idx[perm], self.cost_bps[perm],
                           self.sample_ids)


@dataclass
class Taps:
    """Optional record of intermediate values for diagnostics and tests."""

    values: dict[str, np.ndarray] = field(default_factory=dict)

    def put(self, name: str, t: Tensor | np.ndarray) -> None:
        self.values[name] = np.array(t.value if isinstance(t, Tensor) else t)


# ----------------------------------------------------------------- blocks


def _lin(tape: Tape, x: Tensor, prefix: str, bias: bool = True) -> Tensor:
    if bias:
        return ad.linear(x, tape.param(f"{prefix}_w"), tape.param(f"{prefix}_b"))
    return ad.linear(x, tape.param(prefix))


def _ln(tape: Tape, x: Tensor, prefix: str, eps: float) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x, eps), tape.param(f"{prefix}_ln_g")), tape.param(f"{prefix}_ln_b"))


def adapter(tape: Tape, x: Tensor, prefix: str, cfg: PolicyConfig, sample_ids: Sequence[int]) -> Tensor:
    """Post-norm SwiGLU residual block ``LN(x + drop(W2(W1 x * SiLU(V x))))``."""
    a = ad.linear(x, tape.param(f"{prefix}_w1"), tape.param(f"{prefix}_b1"))
    g = ad.silu(ad.linear(x, tape.param(f"{prefix}_v"), tape.param(f"{prefix}_bv")))
    y = ad.linear(ad.mul(a, g), tape.param(f"{prefix}_w2"), tape.param(f"{prefix}_b2"))
    y = ad.dropout(y, cfg.dropout, prefix, sample_ids)
    return _ln(tape, ad.add(x, y), prefix, cfg.ln_eps)


def static_context(tape: Tape, inp: PolicyInput) -> Tensor:
    e = ad.getitem(tape.param("emb"), np.asarray(inp.asset_idx))
    c = tape.const(np.asarray(inp.cost_bps, dtype=np.float64)[:, None])
    return _lin(tape, ad.concat([e, c], axis=-1), "ctx")


def vsn(tape: Tape, x: np.ndarray, s: Tensor, taps: Taps | None = None) -> Tensor:
    """Context-modulated feature gating followed by per-feature projection."""
    n, f = s.shape[0], x.shape[-1]
    gamma = ad.reshape(ad.add(_lin(tape, s, "film_g"), 1.0), (n, 1, f))
    beta = ad.reshape(_lin(tape, s, "film_b"), (n, 1, f))
    xt = tape.const(x)
    logits = _lin(tape, ad.add(ad.mul(xt, gamma), beta), "gate")
    w = ad.softmax(logits, axis=-1)
    if taps is not None:
        taps.put("vsn_weights", w)
    return ad.add(ad.matmul(ad.mul(w, xt), tape.param("conv_w")), ad.matmul(w, tape.param("conv_b")))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    x = ad.reshape(x, tuple(lead) + (s, heads, d // heads))
    nl = len(lead)
    return ad.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    nl = len(lead)
    x = ad.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return ad.reshape(x, tuple(lead) + (s, h * dh))


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return ad.transpose(x, axes)


def attention(
    q: Tensor,
    k_prev: Tensor,
    v_prev: Tensor,
    bias: np.ndarray,
    heads: int,
    k_now: Tensor | None = None,
    v_now: Tensor | None = None,
    same_day: np.ndarray | None = None,
    taps: Taps | None = None,
    tap_name: str = "",
) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    Inputs are ``[..., S, d]``; ``bias`` broadcasts to ``[..., heads, S, S']``
    and may hold ``-inf``. When ``same_day`` (``[S, S']`` of 0/1) is given,
    key/value pair ``(i, j)`` comes from the ``now`` tensors where it is 1
    and from the ``prev`` tensors where it is 0.
    """
    dh = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    scale = 1.0 / math.sqrt(dh)
    kp, vp = _split_heads(k_prev, heads), _split_heads(v_prev, heads)
    scores = ad.mul(ad.matmul(qh, _swap_last(kp)), scale)
    mixed = same_day is not None and bool(np.any(same_day))
    if mixed:
        kn, vn = _split_heads(k_now, heads), _split_heads(v_now, heads)
        now = ad.mul(ad.matmul(qh, _swap_last(kn)), scale)
        scores = ad.add(ad.mul(now, same_day), ad.mul(scores, 1.0 - same_day))
    a = ad.softmax(scores, axis=-1, bias=bias)
    if taps is not None:
        taps.put(tap_name, a)
    if mixed:
        out = ad.add(ad.matmul(ad.mul(a, same_day), vn), ad.matmul(ad.mul(a, 1.0 - same_day), vp))
    else:
        out = ad.matmul(a, vp)
    return _merge_heads(out)


def delay_context(h: Tensor, exist: np.ndarray, protocol: str, close_rank: np.ndarray):
    """Keys/values available to a spatial block.

    ``h`` is ``[B, L, N, d]`` (time-major) and ``exist`` is ``[B, L, N]``.
    Returns ``(prev, now, same_day, key_valid)`` where ``prev`` is ``h`` lagged
    one step, ``same_day[i, j]`` selects ``now`` for pairs where ``j`` closes
    before ``i`` (cascading only) and ``key_valid`` is ``[B, L, N, N]``. At
    ``t = 0`` no key is valid.
    """
    n = h.shape[2]
    prev = ad.shift_time(h, axis=1)
    ex = np.asarray(exist, dtype=np.float64)
    ex_prev = np.zeros_like(ex)
    ex_prev[:, 1:] = ex[:, :-1]
    if protocol == "cascading":
        r = np.asarray(close_rank)
        same = (r[None, :] < r[:, None]).astype(np.float64)
    else:
        same = np.zeros((n, n))
    valid = same[None, None] * ex[:, :, None, :] + (1.0 - same[None, None]) * ex_prev[:, :, None, :]
    valid[:, 0] = 0.0
    return prev, h, same, valid


def _mask_bias(valid: np.ndarray) -> np.ndarray:
    return np.where(valid > 0, 0.0, -np.inf)


def _gate(tape: Tape, x: Tensor, name: str, cfg: PolicyConfig) -> Tensor:
    return ad.mul(x, tape.param(name)) if cfg.rezero else x


def cross_block(tape: Tape, h: Tensor, exist_t: np.ndarray, st: Structure, cfg: PolicyConfig,
                sample_ids: Sequence[int], taps: Taps | None = None) -> Tensor:
    """Cross-sectional attention on time-major ``h [B, L, N, d]``."""
    prev, now, same, valid = delay_context(h, exist_t, cfg.protocol, st.close_rank)
    bias = _mask_bias(valid)[:, :, None, :, :]
    q = _lin(tape, h, "x_q")
    mixed = bool(same.any())
    out = attention(
        q, _lin(tape, prev, "x_k"), _lin(tape, prev, "x_v"), bias, cfg.heads,
        _lin(tape, now, "x_k") if mixed else None, _lin(tape, now, "x_v") if mixed else None,
        same, taps, "cross_attn",
    )
    out = ad.dropout(_lin(tape, out, "x_o"), cfg.dropout, "x_attn", sample_ids)
    h_attn = _ln(tape, ad.add(h, _gate(tape, out, "x_alpha", cfg)), "x", cfg.ln_eps)
    return adapter(tape, h_attn, "adp_cross", cfg, sample_ids)


def graph_block(tape: Tape, h: Tensor, exist_t: np.ndarray, st: Structure, cfg: PolicyConfig,
                sample_ids: Sequence[int], taps: Taps | None = None) -> Tensor:
    """Macro-graph message passing on time-major ``h [B, L, N, d]``."""
    prev, now, same, valid = delay_context(h, exist_t, cfg.protocol, st.close_rank)
    mixed = bool(same.any())
    if cfg.graph_mode == "gat":
        bias = (_mask_bias(valid) + st.log_bias[None, None])[:, :, None, :, :]
        q = _lin(tape, h, "g_q", bias=False)
        out = attention(
            q, _lin(tape, prev, "g_k", bias=False), _lin(tape, prev, "g_w", bias=False), bias, 1,
            _lin(tape, now, "g_k", bias=False) if mixed else None,
            _lin(tape, now, "g_w", bias=False) if mixed else None,
            same, taps, "graph_attn",
        )
    else:
        wts = st.gcn_weights[None, None] * valid
        if taps is not None:
            taps.put("graph_attn", wts[:, :, None])
        out = ad.matmul(wts * (1.0 - same), _lin(tape, prev, "g_w", bias=False))
        if mixed:
            out = ad.add(out, ad.matmul(wts * same, _lin(tape, now, "g_w", bias=False)))
    out = ad.dropout(out, cfg.dropout, "g_msg", sample_ids)
    h_gnn = _ln(tape, ad.add(h, _gate(tape, out, "g_alpha", cfg)), "g", cfg.ln_eps)
    return adapter(tape, h_gnn, "adp_gnn", cfg, sample_ids)


def temporal_encode(tape: Tape, v: Tensor, s: Tensor, cfg: PolicyConfig, sample_ids: Sequence[int],
                    taps: Taps | None = None) -> Tensor:
    b, n, l, d = v.shape
    xp = ad.linear(v, tape.param("lstm_wx"), tape.param("lstm_b"))
    zeros = np.zeros((b, n, d))
    h0 = ad.add(zeros, ad.tanh(_lin(tape, s, "init_h")))
    c0 = ad.add(zeros, ad.tanh(_lin(tape, s, "init_c")))
    h_lstm = ad.lstm(xp, tape.param("lstm_wh"), h0, c0)
    z = adapter(tape, h_lstm, "adp_lstm", cfg, sample_ids)
    causal = np.where(np.tril(np.ones((l, l))) > 0, 0.0, -np.inf)
    h_temp = attention(_lin(tape, z, "tmp_q"), _lin(tape, z, "tmp_k"), _lin(tape, z, "tmp_v"), causal, cfg.heads)
    h_temp = ad.dropout(_lin(tape, h_temp, "tmp_o"), cfg.dropout, "tmp_attn", sample_ids)
    out = adapter(tape, h_temp, "adp_temp", cfg, sample_ids)
    if taps is not None:
        taps.put("h_temp", out)
    return out


def policy_forward(tape: Tape, cfg: PolicyConfig, inp: PolicyInput, st: Structure,
                   taps: Taps | None = None, return_hidden: bool = False) -> Tensor:
    """Risk weights ``p [B, N, L]`` in (-1, 1); zero wherever ``exist`` is 0."""
    x = np.asarray(inp.x, dtype=np.float64)
    b, n, l, f = x.shape
    if f != cfg.n_features:
        raise ValueError(f"expected {cfg.n_features} features, got {f}")
    exist = np.asarray(inp.exist, dtype=np.float64)
    sids = inp.sample_ids
    s = static_context(tape, inp)
    v = vsn(tape, x, s, taps)
    h = temporal_encode(tape, v, s, cfg, sids, taps)
    exist_t = np.transpose(exist, (0, 2, 1))
    row_mask = exist_t[..., None]
    ht = ad.transpose(h, (0, 2, 1, 3))
    blocks = []
    if cfg.cross_attn:
        blocks.append(cross_block)
    if cfg.graph_mode != "none":
        blocks.append(graph_block)
    if cfg.block_order == "graph_then_cross":
        blocks.reverse()
    for blk in blocks:
        ht = ad.mul(blk(tape, ht, exist_t, st, cfg, sids, taps), row_mask)
    hf = ad.transpose(ht, (0, 2, 1, 3))
    if taps is not None:
        taps.put("h_final", hf)
    logits = ad.reshape(_lin(tape, hf, "head"), (b, n, l))
    p = ad.mul(ad.tanh(logits), exist)
    return (p, hf) if return_hidden else p


def predict(params: Params, cfg: PolicyConfig, inp: PolicyInput, st: Structure) -> np.ndarray:
    """Inference without recording (dropout off)."""
    tape = Tape(params, record=False, training=False)
    return policy_forward(tape, cfg, inp, st).value


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, params: Params, cfg: PolicyConfig, extra: dict | None = None) -> None:
    """``<path>.npz`` with every array plus ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = params.names()
    with open(path.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **{k: params.values[k] for k in names})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "params": {k: list(params.values[k].shape) for k in names},
        "param_order": names,
    }
    manifest.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[Params, PolicyConfig, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    cfg = PolicyConfig(**manifest["config"])
    with np.load(path.with_suffix(".npz")) as z:
        params = Params({k: z[k] for k in manifest["param_order"]})
    return params, cfg, manifest
