import json
import math

import numpy as np
import pytest

from oms.errors import ConfigError, EpisodeError
from oms.harness import (
    ExperimentConfig,
    RegretRow,
    RegretTable,
    emit_outputs,
    mse_curve,
    read_regret_csv,
    run_episode,
    write_regret_csv,
)
from oms.policies import parse_policy
from oms.scm_models import get_model


def small_config(**overrides):
    base = dict(model="iv", policies=["fixed:0.5,0.5", "oracle"],
                horizons=[60, 120], runs=8, seed=3, workers=1)
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# run_episode


def test_run_episode_deterministic(models):
    iv = models["iv"]
    kind = parse_policy("etc:0.2")
    a = run_episode(kind, iv, 200, 5)
    b = run_episode(kind, iv, 200, 5)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_run_episode_oracle_sanity_band(models):
    iv = models["iv"]
    beta, kappa, state, hist = run_episode(parse_policy("oracle"), iv, 2000, 1)
    assert abs(beta - 1.0) < 0.5
    assert len(hist) == 2000


def test_run_episode_error_carries_seed(models):
    iv = models["iv"]
    with pytest.raises(EpisodeError, match="seed=77"):
        run_episode(parse_policy("fixed:1,0"), iv, 50, 77)


def test_run_episode_mode_mismatch(models):
    iv = models["iv"]
    with pytest.raises(ConfigError):
        run_episode(parse_policy("etc:0.2"), iv, 100, 1, budget_mode=True,
                    costs=np.ones(2))
    with pytest.raises(ConfigError):
        run_episode(parse_policy("etc_cs:0.2"), iv, 100, 1)


# ---------------------------------------------------------------------------
# config validation


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(policies=[])
    with pytest.raises(ConfigError):
        small_config(runs=1)
    with pytest.raises(ConfigError):
        small_config(horizons=[100, 100])
    with pytest.raises(ConfigError):
        small_config(policies=["nonsense:1"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": "iv", "policies": ["oracle"],
                                    "horizons": [10], "bogus_key": 1})


# ---------------------------------------------------------------------------
# mse_curve


def test_identical_policies_have_identical_cells(models):
    # fixed_equal and fixed:0.5,0.5 run the same episodes under pairing
    cfg = small_config(policies=["fixed_equal", "fixed:0.5,0.5", "oracle"])
    table = mse_curve(cfg)
    by_label = {(r.policy, r.horizon): r for r in table.rows}
    for horizon in cfg.horizons:
        a = by_label[("fixed_equal", horizon)]
        b = by_label[("fixed:0.5,0.5", horizon)]
        assert a.mse == b.mse
        assert a.rr_pct == b.rr_pct


def test_rr_formula(models):
    cfg = small_config()
    table = mse_curve(cfg)
    by_label = {(r.policy, r.horizon): r for r in table.rows}
    for horizon in cfg.horizons:
        fixed = by_label[("fixed:0.5,0.5", horizon)]
        oracle = by_label[("oracle", horizon)]
        expected = 100.0 * (fixed.mse - oracle.mse) / oracle.mse
        assert fixed.rr_pct == pytest.approx(expected, abs=1e-12)
        assert fixed.rr_lo <= fixed.rr_pct <= fixed.rr_hi
        assert oracle.rr_pct == 0.0 and (oracle.rr_lo, oracle.rr_hi) == (0.0, 0.0)


def test_policy_order_invariance(models):
    t1 = mse_curve(small_config(policies=["fixed:0.5,0.5", "etc:0.2", "oracle"],
                                horizons=[80], runs=6))
    t2 = mse_curve(small_config(policies=["oracle", "etc:0.2", "fixed:0.5,0.5"],
                                horizons=[80], runs=6))
    cells1 = {(r.policy, r.horizon): r.mse for r in t1.rows}
    cells2 = {(r.policy, r.horizon): r.mse for r in t2.rows}
    assert cells1 == cells2


def test_oracle_auto_added(models):
    cfg = small_config(policies=["fixed:0.5,0.5"])
    table = mse_curve(cfg)
    assert any(r.policy == "oracle" for r in table.rows)
    assert table.metadata["oracle_auto_added"] is True


def test_failure_recorded_not_raised(models):
    cfg = small_config(policies=["fixed:1,0", "oracle"], horizons=[50], runs=4)
    table = mse_curve(cfg)
    failed = [r for r in table.rows if r.policy == "fixed:1,0"]
    assert len(failed) == 1 and failed[0].error is not None
    assert math.isnan(failed[0].mse)
    oracle = [r for r in table.rows if r.policy == "oracle"][0]
    assert math.isfinite(oracle.mse)


def test_parallel_matches_serial(models):
    serial = mse_curve(small_config(runs=6, workers=1))
    parallel = mse_curve(small_config(runs=6, workers=2))
    for a, b in zip(serial.rows, parallel.rows):
        assert (a.policy, a.horizon) == (b.policy, b.horizon)
        assert a.mse == b.mse and a.rr_pct == b.rr_pct


# ---------------------------------------------------------------------------
# outputs


def test_csv_round_trip(tmp_path):
    rows = [
        RegretRow("etc:0.1", 300, 1.234567890123456e-3, 5.4e-5, 17.25, 3.5, 31.75),
        RegretRow("oracle", 300, 1.0e-3, 4.2e-5, 0.0, 0.0, 0.0),
    ]
    path = tmp_path / "regret.csv"
    write_regret_csv(RegretTable(rows), path)
    loaded = read_regret_csv(path)
    for a, b in zip(rows, loaded):
        assert a.policy == b.policy and a.horizon == b.horizon
        for field in ("mse", "mse_se", "rr_pct", "rr_lo", "rr_hi"):
            assert getattr(a, field) == getattr(b, field)


def test_emit_outputs_files(tmp_path, models):
    cfg = small_config(out_dir=str(tmp_path / "out"))
    table = mse_curve(cfg)
    paths = emit_outputs(table, cfg.out_dir, cfg)
    svg = open(paths["svg"]).read()
    for policy in {r.policy for r in table.rows}:
        assert svg.count(f">{policy}<") == 1
    assert svg.count("<polyline") == len({r.policy for r in table.rows})
    echo = json.loads(open(paths["config"]).read())
    assert echo["config"]["model"] == "iv"
    assert "ci_method" in echo["metadata"]
    assert "git_describe" in echo
    loaded = read_regret_csv(paths["csv"])
    assert len(loaded) == len(table.rows)


def test_emit_outputs_rejects_empty(tmp_path):
    with pytest.raises(ConfigError):
        emit_outputs(RegretTable([]), tmp_path)
