from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepm import autodiff as ad
from deepm.autodiff import Tape, grad_check
from deepm.graph import build_macro_graph, synthetic_universe
from deepm.model import (
    PolicyConfig,
    PolicyInput,
    Structure,
    Taps,
    adapter,
    delay_context,
    init_params,
    load_checkpoint,
    param_count,
    policy_forward,
    predict,
    save_checkpoint,
)

F, N, L = 3, 4, 12


def make_input(rng, b=2, n=N, l=L, f=F, exist=None):
    x = rng.normal(size=(b, n, l, f))
    ex = np.ones((b, n, l)) if exist is None else exist
    return PolicyInput(x, ex, np.arange(n), np.linspace(0.5, 2.0, n), tuple(range(b)))


def small_cfg(**kw):
    base = dict(n_features=F, n_assets=N, d_model=8, heads=2, dropout=0.2)
    base.update(kw)
    return PolicyConfig(**base)


def pair_structure(n=N, ranks=None):
    groups = [f"g{i // 2}" for i in range(n)]
    return Structure.from_graph(build_macro_graph(synthetic_universe(groups)), ranks)


def warm(params, seed=3, scale=0.5):
    """Give the ReZero gates non-zero values so spatial paths are active."""
    rng = np.random.default_rng(seed)
    for name in ("x_alpha", "g_alpha"):
        if name in params.values:
            params.values[name][...] = scale
    for name in ("head_w",):
        params.values[name] += rng.normal(scale=0.3, size=params.values[name].shape)
    return params


def run(params, cfg, inp, stc, training=True, seed=11, taps=None):
    tape = Tape(params, record=False, seed=seed, training=training)
    return policy_forward(tape, cfg, inp, stc, taps=taps).value


# ------------------------------------------------------------------ VSN


def test_vsn_weights_on_simplex(rng):
    cfg = small_cfg()
    p = init_params(cfg, 0)
    taps = Taps()
    run(p, cfg, make_input(rng), pair_structure(), taps=taps)
    w = taps.values["vsn_weights"]
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-12


def test_vsn_zero_gate_is_uniform(rng):
    cfg = small_cfg()
    p = init_params(cfg, 0)
    p.values["gate_w"][...] = 0.0
    taps = Taps()
    run(p, cfg, make_input(rng), pair_structure(), taps=taps)
    assert np.all(taps.values["vsn_weights"] == 1.0 / F)


def test_film_at_zero_is_identity(rng):
    cfg = small_cfg()
    p = init_params(cfg, 0)
    for k in ("film_g_w", "film_b_w"):
        p.values[k][...] = 0.0
    inp = make_input(rng)
    taps = Taps()
    run(p, cfg, inp, pair_structure(), taps=taps)
    logits = inp.x @ p.values["gate_w"] + p.values["gate_b"]
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(taps.values["vsn_weights"], e / e.sum(axis=-1, keepdims=True), rtol=0, atol=1e-14)


# -------------------------------------------------------------- temporal


@pytest.mark.parametrize("mode", [dict(), dict(cross_attn=False, graph_mode="none"), dict(protocol="cascading")])
def test_temporal_causality_bitwise(rng, mode):
    cfg = small_cfg(**mode)
    p = warm(init_params(cfg, 1))
    stc = pair_structure(ranks=[0, 1, 1, 2])
    inp = make_input(rng)
    base = run(p, cfg, inp, stc)
    t0 = 7
    x2 = inp.x.copy()
    x2[:, :, t0:] += rng.normal(size=x2[:, :, t0:].shape)
    other = run(p, cfg, replace(inp, x=x2), stc)
    assert np.array_equal(base[..., :t0], other[..., :t0])
    assert not np.array_equal(base[..., t0:], other[..., t0:])


def test_single_step_sequence(rng):
    cfg = small_cfg()
    p = warm(init_params(cfg, 0))
    out = run(p, cfg, make_input(rng, l=1), pair_structure())
    assert out.shape == (2, N, 1)
    assert np.all(np.isfinite(out))


def test_adapter_with_zero_output_is_layer_norm(rng):
    cfg = small_cfg(dropout=0.0)
    p = init_params(cfg, 0)
    p.values["adp_lstm_w2"][...] = 0.0
    p.values["adp_lstm_ln_g"][...] = 1.7
    p.values["adp_lstm_ln_b"][...] = -0.3
    x = rng.normal(size=(3, 5, cfg.d_model))
    tape = Tape(p, record=False)
    out = adapter(tape, tape.const(x), "adp_lstm", cfg, (0, 1, 2)).value
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + cfg.ln_eps) * 1.7 - 0.3, atol=1e-12)


# ---------------------------------------------------------- delay context


def test_directed_delay_keys_are_lagged(rng):
    b, l, n = 2, 5, 3
    h = Tape(ad.Params()).const(rng.normal(size=(b, l, n, 4)))
    ex = np.ones((b, l, n))
    ex[0, 2, 1] = 0.0
    prev, now, same, valid = delay_context(h, ex, "directed_delay", np.zeros(n, int))
    assert np.array_equal(prev.value[:, 1:], h.value[:, :-1])
    assert np.all(prev.value[:, 0] == 0.0)
    assert np.all(same == 0.0)
    assert np.all(valid[:, 0] == 0.0)
    # asset 1 missing at t=2 invalidates it as a key at t=3 only
    assert np.all(valid[0, 3, :, 1] == 0.0)
    assert np.all(valid[0, 2, :, 1] == 1.0)
    assert np.all(valid[0, 4, :, 1] == 1.0)


def test_cascading_same_day_only_from_earlier_closes():
    # JP closes before EU which closes before US
    rank = np.array([0, 1, 2])  # JP, EU, US
    h = Tape(ad.Params()).const(np.zeros((1, 3, 3, 2)))
    _, _, same, _ = delay_context(h, np.ones((1, 3, 3)), "cascading", rank)
    expected = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], dtype=float)
    assert np.array_equal(same, expected)


def test_cascading_with_equal_ranks_matches_directed_delay(rng):
    stc = pair_structure(ranks=[1, 1, 1, 1])
    inp = make_input(rng)
    outs = []
    for proto in ("directed_delay", "cascading"):
        cfg = small_cfg(protocol=proto)
        outs.append(run(warm(init_params(cfg, 4)), cfg, inp, stc))
    assert np.array_equal(outs[0], outs[1])


def test_cascading_lets_late_asset_see_early_asset_same_day(rng):
    cfg = small_cfg(protocol="cascading", cross_attn=True, graph_mode="none")
    p = warm(init_params(cfg, 2))
    stc = pair_structure(ranks=[0, 2, 2, 2])
    inp = make_input(rng)
    base = run(p, cfg, inp, stc)
    x2 = inp.x.copy()
    x2[:, 0, 6] += 1.0
    out = run(p, cfg, replace(inp, x=x2), stc)
    # asset 1 closes later than asset 0, so it reacts on the same step
    assert not np.array_equal(base[:, 1, 6], out[:, 1, 6])
    # under the strict protocol it cannot
    cfg_dd = replace(cfg, protocol="directed_delay")
    a = run(p, cfg_dd, inp, stc)
    b = run(p, cfg_dd, replace(inp, x=x2), stc)
    assert np.array_equal(a[:, 1, 6], b[:, 1, 6])


# ------------------------------------------------------ spatial invariants


def test_directed_delay_cross_sectional_causality(rng):
    cfg = small_cfg()
    p = warm(init_params(cfg, 5))
    stc = pair_structure()
    inp = make_input(rng)
    base = run(p, cfg, inp, stc)
    t0, j = 6, 1
    x2 = inp.x.copy()
    x2[:, j, t0] += 2.0
    out = run(p, cfg, replace(inp, x=x2), stc)
    others = [i for i in range(N) if i != j]
    assert np.array_equal(base[:, others, : t0 + 1], out[:, others, : t0 + 1])
    assert not np.array_equal(base[:, j, t0], out[:, j, t0])
    # neighbour 0 shares a group with 1 and reacts one step later
    assert not np.array_equal(base[:, 0, t0 + 1], out[:, 0, t0 + 1])


def test_rezero_at_zero_ignores_keys_and_values(rng):
    cfg = small_cfg()
    p = init_params(cfg, 6)
    assert p.values["x_alpha"] == 0.0 and p.values["g_alpha"] == 0.0
    stc = pair_structure()
    inp = make_input(rng)
    base = run(p, cfg, inp, stc)
    q = p.copy()
    for k in ("x_k_w", "x_v_w", "x_k_b", "x_v_b", "g_k", "g_w"):
        q.values[k] = q.values[k] + rng.normal(size=q.values[k].shape)
    assert np.array_equal(base, run(q, cfg, inp, stc))


def test_masked_asset_gets_no_attention_and_zero_position(rng):
    cfg = small_cfg()
    p = warm(init_params(cfg, 7))
    ex = np.ones((2, N, L))
    ex[:, 2] = 0.0
    taps = Taps()
    out = run(p, cfg, make_input(rng, exist=ex), pair_structure(), taps=taps)
    assert np.all(out[:, 2] == 0.0)
    assert np.all(taps.values["cross_attn"][..., 2] == 0.0)
    assert np.all(taps.values["graph_attn"][..., 2] == 0.0)
    assert np.all(taps.values["h_final"][:, 2] == 0.0)


def test_gat_non_edges_get_exactly_zero(rng):
    cfg = small_cfg()
    p = warm(init_params(cfg, 8))
    stc = pair_structure()
    taps = Taps()
    run(p, cfg, make_input(rng), stc, taps=taps)
    a = taps.values["graph_attn"]  # [B, L, 1, N, N]
    non_edge = ~np.isfinite(stc.log_bias)
    assert np.all(a[..., non_edge] == 0.0)
    assert np.all(a[:, 1:][..., ~non_edge] > 0.0)


def test_gcn_on_complete_graph_is_uniform_mean(rng):
    cfg = small_cfg(graph_mode="gcn", cross_attn=False)
    p = warm(init_params(cfg, 9))
    stc = Structure.from_adjacency(np.ones((N, N)))
    taps = Taps()
    run(p, cfg, make_input(rng), stc, taps=taps)
    w = taps.values["graph_attn"]
    assert np.allclose(w[:, 1:], 1.0 / N, rtol=0, atol=1e-15)
    assert np.all(w[:, 0] == 0.0)


def test_head_is_bounded_and_masked(rng):
    cfg = small_cfg()
    p = warm(init_params(cfg, 10), scale=2.0)
    p.values["head_w"] *= 50.0
    ex = (rng.random((2, N, L)) > 0.3).astype(float)
    out = run(p, cfg, make_input(rng, exist=ex), pair_structure())
    assert np.all(np.abs(out) <= 1.0)
    assert np.all(out[ex == 0] == 0.0)


def test_independent_config_has_no_cross_talk(rng):
    cfg = small_cfg(cross_attn=False, graph_mode="none")
    p = init_params(cfg, 11)
    inp = make_input(rng)
    stc = pair_structure()
    base = run(p, cfg, inp, stc)
    x2 = inp.x.copy()
    x2[:, 0] += rng.normal(size=x2[:, 0].shape)
    out = run(p, cfg, replace(inp, x=x2), stc)
    assert np.array_equal(base[:, 1:], out[:, 1:])


@settings(max_examples=15)
@given(perm_seed=st.integers(0, 10_000), mode=st.sampled_from(["gat", "gcn"]),
       proto=st.sampled_from(["directed_delay", "cascading"]))
def test_permutation_equivariance(perm_seed, mode, proto):
    rng = np.random.default_rng(perm_seed)
    cfg = small_cfg(graph_mode=mode, protocol=proto)
    p = warm(init_params(cfg, 12))
    stc = pair_structure(ranks=[0, 2, 1, 2])
    ex = (rng.random((2, N, L)) > 0.2).astype(float)
    inp = make_input(rng, exist=ex)
    perm = rng.permutation(N)
    base = run(p, cfg, inp, stc, training=False)
    out = run(p, cfg, inp.permute_assets(perm), stc.permute(perm), training=False)
    assert np.max(np.abs(out - base[:, perm])) <= 1e-9


# -------------------------------------------------------------- gradients


def test_full_model_grad_check():
    rng = np.random.default_rng(0)
    cfg = PolicyConfig(n_features=2, n_assets=3, d_model=4, heads=2, dropout=0.2)
    p = warm(init_params(cfg, 13))
    stc = pair_structure(n=3, ranks=[0, 1, 1])
    inp = make_input(rng, b=2, n=3, l=12, f=2)
    upstream = rng.normal(size=(2, 3, 12))

    def fn(tape):
        return ad.tsum(ad.mul(policy_forward(tape, cfg, inp, stc), upstream))

    rep = grad_check(fn, p, tol=1e-5, training=True, max_coords=12, seed=5)
    assert rep.deterministic
    assert rep.max_rel_error < 1e-5, (rep.worst, rep.max_rel_error)


# -------------------------------------------------------------- bookkeeping


@pytest.mark.parametrize("kw", [
    dict(),
    dict(graph_mode="gcn"),
    dict(graph_mode="none", cross_attn=False),
    dict(rezero=False, adapter_hidden=12),
    dict(cross_attn=False),
])
def test_param_count_matches_initialization(kw):
    cfg = small_cfg(**kw)
    assert param_count(cfg) == init_params(cfg, 0).count()


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = small_cfg(graph_mode="gcn")
    p = warm(init_params(cfg, 14))
    save_checkpoint(tmp_path / "ck", p, cfg, {"seed": 14})
    q, cfg2, manifest = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and manifest["seed"] == 14
    assert q.names() == p.names()
    inp = make_input(rng)
    stc = pair_structure()
    assert np.array_equal(predict(p, cfg, inp, stc), predict(q, cfg2, inp, stc))


def test_checkpoint_rejects_unknown_version(tmp_path):
    cfg = small_cfg()
    save_checkpoint(tmp_path / "ck", init_params(cfg, 0), cfg)
    path = tmp_path / "ck.json"
    path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "ck")


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(protocol="psychic")
    with pytest.raises(ValueError):
        small_cfg(d_model=9, heads=2)
