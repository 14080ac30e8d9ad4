import json
from pathlib import Path

import numpy as np
import pytest

from kpic import cli, pipeline
from kpic.config import ConfigError, load_config, parse_config
from kpic.estimators import EstimationError

REPO = Path(__file__).resolve().parents[1]


def lq_config(**over) -> dict:
    cfg = {
        "problem": {"name": "lq_toy", "params": {"omega": 1.0, "box": [-2.0, 2.0]}},
        "estimator": {"kind": "basic", "eps": 1e-3, "bandwidth": {"policy": "median", "scale": 1.0}},
        "sampling": {"mode": "transitions", "m": 200, "seed": 0,
                     "prior": {"kind": "uniform", "low": [-3.0], "high": [3.0]}},
        "evaluation": {"starts": [1.0], "n_rollouts": 50, "policies": ["kernel", "oracle", "zero"]},
        "sweep": {"samples": [50, 100], "seeds": [0, 1]},
    }
    for key, value in over.items():
        cfg[key] = {**cfg.get(key, {}), **value} if isinstance(value, dict) else value
    return cfg


def write_config(tmp_path, cfg, name="cfg.json") -> str:
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


def run(*args) -> int:
    return cli.main([str(a) for a in args])


def snapshot(out: Path, skip=("train_log.json",)) -> dict:
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file() and p.name not in skip}


# ---------------------------------------------------------------- config parsing


@pytest.mark.parametrize("name", ["double_slit.json", "double_slit_rl.json", "lq_toy.json", "arm.json"])
def test_shipped_configs_validate(name):
    cfg = load_config(REPO / "configs" / name)
    assert cfg.resolved()["problem"]["name"] in name


def test_missing_prior_bound_names_field_and_line():
    text = """{
  "problem": {"name": "lq_toy"},
  "sampling": {
    "m": 10,
    "prior": {"kind": "uniform", "low": [-1.0]}
  }
}"""
    with pytest.raises(ConfigError) as info:
        parse_config(text, "c.json")
    msg = str(info.value)
    assert "c.json:5:" in msg and "sampling.prior.high" in msg


def test_unknown_key_rejected_with_line():
    text = '{\n  "problem": {"name": "lq_toy"},\n  "sampling": {"m": 10},\n  "colour": 1\n}'
    with pytest.raises(ConfigError, match=r"c.json:4: colour: Extra inputs"):
        parse_config(text, "c.json")


def test_invalid_json_and_positive_constraints():
    with pytest.raises(ConfigError, match=r":2: invalid JSON"):
        parse_config('{"problem":\n,}', "c.json")
    with pytest.raises(ConfigError, match="estimator.eps"):
        parse_config(json.dumps(lq_config(estimator={"eps": -1.0})))
    with pytest.raises(ConfigError, match="bandwidth.value"):
        parse_config(json.dumps(lq_config(estimator={"bandwidth": {"policy": "fixed"}})))
    with pytest.raises(ConfigError, match="q0"):
        parse_config(json.dumps({"problem": {"name": "arm", "params": {"n_links": 3}}, "sampling": {"m": 5}}))


def test_missing_config_file(tmp_path, capsys):
    assert run("sample", "--config", tmp_path / "nope.json") == cli.EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


# ---------------------------------------------------------------- commands


def test_sample_writes_requested_rows(tmp_path):
    out = tmp_path / "o"
    cfg = write_config(tmp_path, lq_config(sampling={"m": 10}))
    assert run("sample", "--config", cfg, "--out", out) == 0
    lines = (out / "dataset.csv").read_text().splitlines()
    assert lines[0] == "x_0,xp_0" and len(lines) == 11
    assert all(len(r.split(",")) == 2 for r in lines[1:])
    meta = json.loads((out / "dataset.json").read_text())
    assert meta["n"] == 10 and meta["prior_tag"] == "uniform[-3.0:3.0]"
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["estimator"]["tau"] == 1e-4 and resolved["output_dir"] == str(out)


def test_pipeline_is_byte_reproducible(tmp_path):
    out = tmp_path / "o"
    cfg = write_config(tmp_path, lq_config())
    first = None
    for _ in range(2):
        for cmd in ("sample", "train", "evaluate"):
            assert run(cmd, "--config", cfg, "--out", out) == 0
        snap = snapshot(out)
        first = first or snap
    assert snap == first
    assert {"dataset.csv", "model/alpha_0.csv", "l1_curve.csv", "cost_bars.csv", "psi_slice.csv"} <= set(snap)


def test_seed_override_changes_data(tmp_path):
    cfg = write_config(tmp_path, lq_config(sampling={"m": 10}))
    run("sample", "--config", cfg, "--out", tmp_path / "a")
    run("sample", "--config", cfg, "--out", tmp_path / "b", "--seed", 9)
    assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "b" / "dataset.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "dataset.json").read_text())["seed"] == 9


def test_oracle_psi_source_gives_zero_l1(tmp_path):
    out = tmp_path / "o"
    cfg = write_config(tmp_path, lq_config(evaluation={"psi_source": "oracle", "policies": ["zero"]}))
    for cmd in ("sample", "train", "evaluate"):
        assert run(cmd, "--config", cfg, "--out", out) == 0
    rows = pipeline.read_csv_rows(out / "l1_curve.csv")
    assert rows[0]["estimator"] == "oracle" and float(rows[0]["l1"]) == 0.0


def test_zero_policy_on_cost_free_problem_costs_nothing(tmp_path):
    out = tmp_path / "o"
    cfg = lq_config(evaluation={"policies": ["zero"]})
    cfg["problem"]["params"]["omega"] = 0.0
    path = write_config(tmp_path, cfg)
    for cmd in ("sample", "train", "evaluate"):
        assert run(cmd, "--config", path, "--out", out) == 0
    row = pipeline.read_csv_rows(out / "cost_bars.csv")[0]
    assert row["policy"] == "zero" and float(row["mean"]) == 0.0 and float(row["se"]) == 0.0


def test_importance_with_zero_policy_writes_basic_model(tmp_path):
    outs = {}
    for kind in ("basic", "importance"):
        out = tmp_path / kind
        cfg = write_config(tmp_path, lq_config(estimator={"kind": kind}), f"{kind}.json")
        assert run("sample", "--config", cfg, "--out", out) == 0
        assert run("train", "--config", cfg, "--out", out) == 0
        outs[kind] = snapshot(out / "model", skip=("meta.json",))
    assert outs["basic"] == outs["importance"] and len(outs["basic"]) == 4


def test_train_without_dataset_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, lq_config())
    assert run("train", "--config", cfg, "--out", tmp_path / "empty") == cli.EXIT_CONFIG
    assert "dataset not found" in capsys.readouterr().err


def test_dimension_mismatch_is_config_error(tmp_path, capsys):
    cfg = lq_config()
    cfg["sampling"]["prior"] = {"kind": "uniform", "low": [0.0, 0.0], "high": [1.0, 1.0]}
    assert run("sample", "--config", write_config(tmp_path, cfg), "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "dimension" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path, monkeypatch, capsys):
    out = tmp_path / "o"
    cfg = write_config(tmp_path, lq_config())
    assert run("sample", "--config", cfg, "--out", out) == 0

    def boom(*a, **k):
        raise EstimationError("non-finite alpha at step 1")

    monkeypatch.setattr(pipeline, "train", boom)
    assert run("train", "--config", cfg, "--out", out) == cli.EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


def test_sweep_resumes_and_records_failures(tmp_path, monkeypatch):
    out = tmp_path / "o"
    cfg = write_config(tmp_path, lq_config())
    assert run("sweep", "--config", cfg, "--out", out) == 0
    path = out / "l1_curve.csv"
    full = path.read_bytes()
    rows = pipeline.read_csv_rows(path)
    assert [(r["samples"], r["seed"]) for r in rows] == [("50", "0"), ("50", "1"), ("100", "0"), ("100", "1")]
    assert all(r["status"] == "ok" and float(r["l1"]) > 0 for r in rows)

    lines = full.decode().splitlines(keepends=True)
    path.write_text("".join(lines[:2] + lines[3:]))  # drop one finished row
    calls = []
    real = pipeline.sweep_entry
    monkeypatch.setattr(pipeline, "sweep_entry", lambda *a: calls.append(a[1:3]) or real(*a))
    assert run("sweep", "--config", cfg, "--out", out) == 0
    assert calls == [(50, 1)] and path.read_bytes() == full

    def bad_train(*a, **k):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(pipeline, "train", bad_train)
    assert run("sweep", "--config", cfg, "--out", out, "--samples", "200", "--seeds", "0") == 0
    failed = [r for r in pipeline.read_csv_rows(path) if r["samples"] == "200"]
    assert failed[0]["status"].startswith("failed: LinAlgError") and failed[0]["l1"] == "nan"
    assert len(pipeline.read_csv_rows(path)) == 5


def test_double_slit_commands_run(tmp_path):
    out = tmp_path / "o"
    cfg = {
        "problem": {"name": "double_slit"},
        "estimator": {"kind": "lowrank", "eps": 1e-5, "max_rank": 100, "tau": 1e-3,
                      "bandwidth": {"policy": "median", "scale": 0.05}},
        "sampling": {"mode": "transitions", "m": 1000, "seed": 0},
        "evaluation": {"n_rollouts": 50, "mc_n_traj": 20, "slice_times": [0.0, 1.0]},
    }
    path = write_config(tmp_path, cfg)
    for cmd in ("sample", "train", "evaluate"):
        assert run(cmd, "--config", path, "--out", out) == 0
    bars = pipeline.read_csv_rows(out / "cost_bars.csv")
    assert [(b["policy"], b["start"]) for b in bars][:2] == [("kernel", "-3"), ("kernel", "1.75")]
    assert len(bars) == 8
    assert {r["t"] for r in pipeline.read_csv_rows(out / "psi_slice.csv")} == {"0", "1"}


def test_arm_commands_run(tmp_path):
    out = tmp_path / "o"
    cfg = {
        "problem": {"name": "arm", "params": {"T": 0.2, "n_skill_traj": 5, "reference_n_traj": 10, "n_probes": 20}},
        "estimator": {"kind": "reuse", "eps": 1e-5, "max_rank": 100},
        "sampling": {"mode": "transitions", "m": 300, "seed": 0},
        "evaluation": {"n_rollouts": 20, "policies": ["kernel", "zero"]},
    }
    path = write_config(tmp_path, cfg)
    for cmd in ("sample", "train", "evaluate"):
        assert run(cmd, "--config", path, "--out", out) == 0
    l1 = pipeline.read_csv_rows(out / "l1_curve.csv")[0]
    assert l1["estimator"] == "reuse:reference" and np.isfinite(float(l1["l1"]))
    log = json.loads((out / "train_log.json").read_text())
    assert log["n_skill_traj"] == 5 and len(log["alpha_norms"]) == 10
    bad = dict(cfg, estimator={"kind": "basic"})
    assert run("train", "--config", write_config(tmp_path, bad, "bad.json"), "--out", out) == cli.EXIT_CONFIG
