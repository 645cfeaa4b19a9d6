import json

import numpy as np
import pytest
import yaml

from chainsde.cli import main
from chainsde.errors import ConfigError
from chainsde.filtering import reference_observations
from chainsde.io import (
    fmt,
    load_config,
    read_csv,
    read_ensemble_cache,
    read_observation_csv,
    validate_config,
    write_ensemble_cache,
    write_observation_csv,
)
from chainsde.model import TimeGrid, builtin_model
from chainsde.simulate import simulate_chain

MINIMAL = {
    "schema_version": 1,
    "command": "simulate",
    "seed": 42,
    "model": {"name": "zero"},
    "numeric": {"grid": {"T": 0.1, "dt": 0.01}, "n_paths": 4, "depth": 2},
}


def write_cfg(tmp_path, cfg, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def test_fmt_roundtrips():
    v = 0.1 + 0.2
    assert float(fmt(v)) == v
    assert fmt(np.int64(3)) == "3"


def test_cache_roundtrip(tmp_path):
    ens = simulate_chain(builtin_model("ou-chain"), 3, None, TimeGrid.over(0.1, 0.01), 5, 9, levels=(1, 3))
    p = write_ensemble_cache(tmp_path / "e.dcse", ens)
    assert p.read_bytes()[:4] == b"DCSE"
    back = read_ensemble_cache(p)
    assert np.array_equal(back.values, ens.values)
    assert back.levels == (1, 3) and back.grid == ens.grid and back.seed == 9


def test_observation_csv_roundtrip(tmp_path):
    obs = reference_observations(builtin_model("zero"), TimeGrid.over(0.1, 0.01), 1, 0)[0]
    p = write_observation_csv(tmp_path / "o.csv", obs)
    back = read_observation_csv(p)
    assert np.array_equal(back.values, obs.values)
    assert back.grid.n_steps == 10


def test_config_errors_name_the_key(tmp_path):
    bad = dict(MINIMAL, extra=1)
    with pytest.raises(ConfigError, match="config.extra"):
        validate_config(bad)
    with pytest.raises(ConfigError, match="model.drift.kind"):
        validate_config(dict(MINIMAL, model={"drift": {"kind": "cubic"}}))
    with pytest.raises(ConfigError, match="schema_version"):
        validate_config(dict(MINIMAL, schema_version=2))
    with pytest.raises(ConfigError, match="numeric.grid.dt"):
        validate_config(dict(MINIMAL, numeric={"grid": {"T": 1.0}}))
    cfg = load_config(write_cfg(tmp_path, MINIMAL))
    assert cfg["seed"] == 42


def test_cli_minimal_simulate(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(write_cfg(tmp_path, MINIMAL)), "--out", str(out)]) == 0
    rows = read_csv(out / "ensemble.csv")
    assert len(rows) == 4 * 2 * 11
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["artifacts"] == ["ensemble.csv", "ensemble.dcse"]
    assert manifest["config"]["seed"] == 42


def test_cli_missing_seed(tmp_path, capsys):
    cfg = {k: v for k, v in MINIMAL.items() if k != "seed"}
    assert main(["simulate", "--config", str(write_cfg(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err


def test_cli_seed_flag_overrides(tmp_path):
    cfg = {k: v for k, v in MINIMAL.items() if k != "seed"}
    p = write_cfg(tmp_path, cfg)
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o"), "--seed", "5"]) == 0


def test_cli_domain_error_exit_1(tmp_path):
    cfg = dict(MINIMAL, model={"name": "ou-chain"}, numeric={"grid": {"T": 0.1, "dt": 0.01}, "n_paths": 2})
    p = write_cfg(tmp_path, cfg)
    # the SPDE CFL condition fails on this coarse grid
    assert main(["filter", "--config", str(p), "--method", "spde", "--out", str(tmp_path / "f")]) == 1


def test_cli_byte_identical_reruns(tmp_path):
    p = write_cfg(tmp_path, dict(MINIMAL, model={"name": "ou-chain"}))
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path / d), "--threads", "2" if d == "b" else "1"]) == 0
    assert (tmp_path / "a/ensemble.csv").read_bytes() == (tmp_path / "b/ensemble.csv").read_bytes()
    assert (tmp_path / "a/ensemble.dcse").read_bytes() == (tmp_path / "b/ensemble.dcse").read_bytes()


def test_cli_filter_and_estimate(tmp_path):
    cfg = dict(MINIMAL, model={"name": "ou-chain"}, numeric={"grid": {"T": 0.1, "dt": 1e-4}, "particles": 200})
    p = write_cfg(tmp_path, cfg)
    out = tmp_path / "f"
    assert main(["filter", "--config", str(p), "--method", "all", "--out", str(out)]) == 0
    for method in ("particle", "spde", "kalman"):
        rows = read_csv(out / f"filter_{method}.csv")
        assert len(rows) == 1001
        summary = json.loads((out / f"filter_{method}.json").read_text())
        assert set(summary) >= {"final_mean", "final_var", "mass_drift"}
    # reuse the written observations as an external CSV
    assert main(["filter", "--config", str(p), "--obs", str(out / "observations.csv"), "--method", "kalman", "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g/filter_kalman.csv").read_bytes() == (out / "filter_kalman.csv").read_bytes()

    cfg = dict(MINIMAL, model={"name": "ou-chain"}, numeric={"grid": {"T": 0.2, "dt": 1e-2}})
    p = write_cfg(tmp_path, cfg, "est.yaml")
    assert main(["estimate", "--config", str(p), "--k", "6", "--reps", "5", "--out", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e/estimate.csv")
    assert len(rows) == 5
    assert list(rows[0]) == ["replication", "u_hat", "sigma_k2", "standardized"]


def test_cli_analyze_joint(tmp_path):
    cfg = dict(MINIMAL, model={"name": "ou-chain"}, numeric={"grid": {"T": 0.5, "dt": 1e-2}, "n_paths": 2000})
    p = write_cfg(tmp_path, cfg)
    assert main(["analyze", "--config", str(p), "--report", "joint", "--out", str(tmp_path / "j")]) == 0
    assert len(read_csv(tmp_path / "j/joint.csv")) == 1
