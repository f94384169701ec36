from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepm.autodiff import Params
from deepm.data import LeadLag, SynthSpec, business_days, prepare, synth_generate
from deepm.graph import build_macro_graph, synthetic_universe
from deepm.model import PolicyConfig, Structure, init_params
from deepm.objective import LossConfig, turnover_cost
from deepm.training import (
    AdamState,
    Block,
    EarlyStopper,
    Ensemble,
    EnsembleSpec,
    RunContext,
    SeedResult,
    TrainConfig,
    clip_global_norm,
    ema_early_stop,
    ensemble_select,
    gather,
    make_sequences,
    mean_abs_turnover,
    optimizer_step,
    train_seed,
    walk_forward_plan,
)
from deepm.training import test_positions as oos_positions

TINY = TrainConfig(iterations=2, batch_size=4, microbatch_size=2, seq_len=30, burn_in=10, test_burn_in=20,
                   eval_every=1, learning_rate=1e-3)


def _params(**arrays):
    p = Params()
    for k, v in arrays.items():
        p.add(k, np.asarray(v, dtype=np.float64))
    return p


# ------------------------------------------------------------------ AdamW


def test_adamw_zero_grad_applies_pure_decay():
    p = _params(w=[1.0, -2.0, 0.5])
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.1)
    optimizer_step(p, {"w": np.zeros(3)}, cfg, AdamState())
    np.testing.assert_allclose(p.values["w"], np.array([1.0, -2.0, 0.5]) * (1 - 1e-3), rtol=1e-15)


def test_adam_first_step_moves_by_learning_rate():
    p = _params(w=[0.0, 0.0])
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0)
    optimizer_step(p, {"w": np.array([0.3, -0.01])}, cfg, AdamState())
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.values["w"], [-1e-2, 1e-2], rtol=1e-5)


def test_non_finite_gradient_skips_step():
    p = _params(w=[1.0])
    st_ = AdamState()
    assert not optimizer_step(p, {"w": np.array([np.nan])}, TrainConfig(), st_)
    assert p.values["w"][0] == 1.0 and st_.skipped == 1 and st_.step == 0


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == 5.0
    total = math.sqrt(sum(float(np.sum(v * v)) for v in clipped.values()))
    assert total == pytest.approx(1.0, rel=1e-15)
    same, _ = clip_global_norm(g, 10.0)
    assert same is g


# --------------------------------------------------------- early stopping


def test_constant_history_stops_after_burn_in_plus_patience():
    cfg = TrainConfig(patience=5, stop_burn_in=3, min_delta=0.001)
    d = ema_early_stop([1.0] * 50, cfg)
    assert d.stop and d.stopped_at == 3 + 5 and d.best_index == 0


def test_spike_is_smoothed():
    cfg = TrainConfig(ema_alpha=0.5, patience=100, stop_burn_in=0, min_delta=0.0)
    d = ema_early_stop([0.0, 0.0, 4.0, 0.0, 0.0], cfg)
    np.testing.assert_allclose(d.smoothed, [0.0, 0.0, 2.0, 1.0, 0.5])
    assert d.best_index == 2


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=60), st.floats(0.05, 1.0))
def test_ema_recursion(history, alpha):
    es = EarlyStopper(alpha, 1000, 0.0, 0)
    for s in history:
        es.update(s)
    want = [history[0]]
    for s in history[1:]:
        want.append(alpha * s + (1 - alpha) * want[-1])
    np.testing.assert_allclose(es.smoothed, want, rtol=1e-12, atol=1e-12)
    assert es.best == pytest.approx(max(want))


# ----------------------------------------------------------- walk-forward


def test_fifteen_years_give_two_blocks():
    dates = business_days("2000-01-03", 15 * 261)
    plan = walk_forward_plan(dates, block_years=5, val_frac=0.1)
    assert len(plan.blocks) == 2
    b0, b1 = plan.blocks
    assert b0.train[0] == 0 and b0.val[1] == b0.test[0] and b0.test[1] == b1.test[0]
    assert str(dates[b0.test[0]]) >= "2005-01-03" and str(dates[b1.test[0]]) >= "2010-01-03"
    n_train = b0.val[1] - b0.train[0]
    assert b0.val[1] - b0.val[0] == round(0.1 * n_train)
    assert b1.train[1] > b0.train[1]  # expanding window


def test_walk_forward_rejects_short_history():
    with pytest.raises(ValueError, match="more than 5 years"):
        walk_forward_plan(business_days("2000-01-03", 1000), block_years=5)


# -------------------------------------------------------------- sequences


def test_sequence_starts_sixty_three_apart():
    s = make_sequences(0, 21 + 168, 84, 21)
    np.testing.assert_array_equal(s.starts, [0, 63])
    assert s.loss_mask[:, :21].sum() == 0 and s.loss_mask[:, 21:].all()


@pytest.mark.filterwarnings("ignore:range")
@given(st.integers(0, 400), st.integers(63, 900), st.integers(30, 90), st.integers(1, 25))
def test_sequences_tile_without_overlap(start, length, seq_len, burn_in):
    if burn_in >= seq_len:
        return
    stop = start + length
    s = make_sequences(start, stop, seq_len, burn_in, tail=True, context_floor=0)
    covered = np.zeros(stop + seq_len, dtype=int)
    for k, a in enumerate(s.starts):
        assert a >= 0 and a + seq_len <= stop
        covered[a + np.flatnonzero(s.loss_mask[k])] += 1
    assert covered.max() <= 1
    if len(s):
        # with a tail sequence the union reaches the end of the range
        assert covered[stop - 1] == 1


def test_test_mode_covers_range_exactly_once():
    s = make_sequences(300, 700, 84, 63, tail=True, context_floor=0)
    cover = np.zeros(800, dtype=int)
    for k, a in enumerate(s.starts):
        cover[a + np.flatnonzero(s.loss_mask[k])] += 1
    np.testing.assert_array_equal(cover[300:700], 1)
    assert cover[:300].sum() == 0 and cover[700:].sum() == 0


def test_short_range_warns():
    with pytest.warns(UserWarning):
        s = make_sequences(0, 50, 84, 21)
    assert len(s) == 0


# --------------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny_run():
    spec = SynthSpec(n_assets=3, n_days=700, seed=1, lead_lag=(LeadLag(0, 1, 0.5),))
    panel = synth_generate(spec)
    data = prepare(panel)
    first = int(np.argmax(data.live.any(axis=0)))
    block = Block((first, first + 200), (first + 200, first + 260), (first + 260, 699))
    st_ = Structure.from_graph(build_macro_graph(synthetic_universe(["a", "a", "b"])))
    ctx = RunContext(PolicyConfig(n_features=6, n_assets=3, d_model=8, heads=2, dropout=0.2), st_,
                     np.full(3, 1e-4), LossConfig())
    return data, block, ctx


def test_train_seed_is_bitwise_deterministic(tiny_run):
    data, block, ctx = tiny_run
    a = train_seed(3, data, ctx, TINY, block)
    b = train_seed(3, data, ctx, TINY, block)
    assert a.history == b.history
    for k in a.params.names():
        np.testing.assert_array_equal(a.params.values[k], b.params.values[k])
    c = train_seed(4, data, ctx, TINY, block)
    assert c.history != a.history


def test_zero_iterations_returns_init_and_one_eval(tiny_run):
    data, block, ctx = tiny_run
    r = train_seed(0, data, ctx, replace(TINY, iterations=0), block)
    assert r.iterations_run == 0 and len(r.history) == 1 and r.best_index == 0
    init = init_params(ctx.model, 0)
    for k in init.names():
        np.testing.assert_array_equal(r.params.values[k], init.values[k])


def test_test_positions_bounded_and_confined(tiny_run):
    data, block, ctx = tiny_run
    r = train_seed(0, data, ctx, TINY, block)
    p = oos_positions(r.params, ctx, data, block, TINY)
    a, b = block.test
    assert np.all(np.abs(p) <= 1.0)
    assert not np.any(p[:, :a]) and not np.any(p[:, b:])
    assert not np.any(p[~data.live])
    assert np.count_nonzero(p[:, a:b].any(axis=0)) > 0.9 * (b - a)


def test_gather_masks_days_without_live_assets(tiny_run):
    data, block, _ = tiny_run
    batch = gather(data, make_sequences(0, 300, 30, 10))
    assert not np.any(batch.loss_mask & ~batch.live.any(axis=1))


# ---------------------------------------------------------------- ensemble


def _result(seed, score, failed=False):
    return SeedResult(seed, Params(), score, [score], [score], 0, 1, failed)


def test_ensemble_selects_top_k_with_seed_tiebreak():
    rs = [_result(0, 0.5), _result(1, 0.9), _result(2, 0.9), _result(3, 2.0, failed=True), _result(4, 0.1)]
    ens = ensemble_select(rs, 2)
    assert ens.seeds == [1, 2]
    with pytest.warns(UserWarning):
        assert len(ensemble_select(rs, 5).members) == 4


def test_ensemble_of_one_is_identity(rng):
    p = rng.normal(size=(3, 20))
    np.testing.assert_array_equal(Ensemble([_result(0, 1.0)]).positions([p]), p)


@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]))
def test_ensemble_turnover_never_exceeds_member_mean(seed, k):
    rng = np.random.default_rng(seed)
    paths = rng.integers(-1024, 1025, size=(k, 3, 40)) / 1024.0
    sigma = rng.integers(8, 33, size=(3, 1)) / 16.0 * np.ones((3, 40))
    mask = np.ones((3, 40), bool)
    ens = Ensemble([_result(i, 0.0) for i in range(k)]).positions(list(paths))
    members = np.mean([mean_abs_turnover(p, sigma, mask, eps=0.0) for p in paths])
    assert mean_abs_turnover(ens, sigma, mask, eps=0.0) <= members
    assert turnover_cost(ens.T, sigma[:, 0]) <= np.mean([turnover_cost(p.T, sigma[:, 0]) for p in paths])


def test_ensemble_spec_validation():
    with pytest.raises(ValueError):
        EnsembleSpec(4, 5)
    assert EnsembleSpec.paper_scale() == EnsembleSpec(50, 25)
