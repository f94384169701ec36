from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from deepm.config import DESK_MODEL, PAPER_MODEL, ConfigError, load_config, parse_config

TINY = Path(__file__).parent / "data" / "tiny.yaml"


def test_defaults_are_desk_scale():
    cfg = parse_config({})
    assert cfg.model == DESK_MODEL
    assert cfg.train.learning_rate == 1e-3 and cfg.ensemble.n_seeds == 8
    assert cfg.seed_list() == list(range(8))


def test_paper_scale_then_file_overrides():
    cfg = parse_config({"train": {"iterations": 7}}, paper_scale=True)
    assert cfg.model == PAPER_MODEL
    assert cfg.train.learning_rate == 1e-4 and cfg.train.iterations == 7
    assert (cfg.ensemble.n_seeds, cfg.ensemble.top_k) == (50, 25)


@pytest.mark.parametrize("raw, bad", [
    ({"trian": {}}, "trian"),
    ({"train": {"lr": 1}}, "lr"),
    ({"model": {"d_modle": 8}}, "d_modle"),
    ({"data": {"synth": {"n_asset": 3}}}, "n_asset"),
    ({"ablate": [{"name": "x", "modle": {}}]}, "modle"),
])
def test_unknown_keys_rejected_with_valid_list(raw, bad):
    with pytest.raises(ConfigError) as exc:
        parse_config(raw)
    assert bad in str(exc.value) and "valid" in str(exc.value)


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError):
        parse_config({"train": {"learning_rate": -1}})
    with pytest.raises(ConfigError):
        parse_config({"model": {"graph_mode": "spectral"}})
    with pytest.raises(ConfigError):
        parse_config({"baselines": {"kinds": ["buy_and_pray"]}})
    with pytest.raises(ConfigError):
        parse_config({"ablate": [{"model": {}}]})
    with pytest.raises(ConfigError):
        parse_config({"data": {"source": "csv"}})


def test_hash_is_stable_and_sensitive():
    a = load_config(TINY)
    b = load_config(TINY)
    assert a.hash() == b.hash() and len(a.hash()) == 16
    raw = yaml.safe_load(TINY.read_text())
    raw["train"]["iterations"] = 3
    assert parse_config(raw).hash() != a.hash()


def test_ablation_rows_override_sections():
    cfg = load_config(TINY)
    row = cfg.with_row({"name": "x", "model": {"graph_mode": "none"}, "loss": {"gamma": 0.25}})
    assert row.model["graph_mode"] == "none" and row.model["d_model"] == 8
    assert row.loss.gamma == 0.25 and row.loss.tau == cfg.loss.tau
    assert row.hash() != cfg.hash()


def test_policy_config_built_from_sections():
    cfg = load_config(TINY)
    pc = cfg.policy(6, 3)
    assert (pc.n_features, pc.n_assets, pc.d_model, pc.heads) == (6, 3, 8, 2)


def test_synth_spec_from_yaml():
    spec = load_config(TINY).data.synth_spec()
    assert spec.n_assets == 3 and spec.lead_lag[0].follower == 1 and spec.groups == ("a", "a", "b")
