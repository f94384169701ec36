from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from deepm.cli import atomic_dir, build_parser, main, resolve

TINY = Path(__file__).parent / "data" / "tiny.yaml"


def run(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = {c: run(c, "--config", TINY, "--out", out) for c in ("synth", "features", "train", "backtest", "report")}
    return out, codes


def test_chain_succeeds_and_stamps_hashes(chain):
    out, codes = chain
    assert all(v == 0 for v in codes.values()), codes
    stamps = {json.loads((out / d / "manifest.json").read_text())["config_hash"]
              for d in ("data", "features", "train", "backtest", "report")}
    assert len(stamps) == 1
    with open(out / "backtest" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["strategy"] for r in rows} == {"deepm", "passive", "tsmom"}
    assert {r["config_hash"] for r in rows} == stamps
    assert (out / "report" / "report.md").read_text().startswith("| Strategy")


def test_train_resumes_from_checkpoints(chain):
    out, _ = chain
    ckpt = sorted((out / "train" / "checkpoints").rglob("*.npz"))
    before = [p.stat().st_mtime_ns for p in ckpt]
    assert run("train", "--config", TINY, "--out", out) == 0
    assert [p.stat().st_mtime_ns for p in ckpt] == before


def test_unknown_key_is_hard_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  learning_rte: 0.1\n")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "learning_rte" in err and "learning_rate" in err


def test_report_without_backtest_fails(tmp_path):
    assert run("report", "--config", TINY, "--out", tmp_path) == 1


def test_ablate_two_rows_deterministic(tmp_path):
    tables = []
    for k in range(2):
        out = tmp_path / f"a{k}"
        assert run("ablate", "--config", TINY, "--out", out) == 0
        tables.append((out / "ablate" / "metrics.csv").read_bytes())
    assert tables[0] == tables[1]
    rows = tables[0].decode().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["full", "no_graph"]


def test_seed_flag_shifts_ensemble(tmp_path):
    args = build_parser().parse_args(["train", "--config", str(TINY), "--seed", "10"])
    assert resolve(args).seed_list() == [10, 11]


def test_default_out_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DEEPM_OUT", str(tmp_path / "env"))
    assert run("synth", "--config", TINY) == 0
    assert (tmp_path / "env" / "data" / "prices.csv").exists()


def test_atomic_dir_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "stage"
    with pytest.raises(RuntimeError):
        with atomic_dir(target) as tmp:
            (tmp / "partial.csv").write_text("x")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
