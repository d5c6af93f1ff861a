import json

import pytest

from impest import estimation as est
from impest.config import ConfigError, RunConfig, apply_overrides


def test_defaults_load_without_file():
    cfg = RunConfig.load(None)
    assert cfg.mode == est.LLE
    assert cfg.simulation_settings().n_train == 50
    assert cfg.solver_options().tol == 1e-7


def test_overrides_parse_json_values(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mode": "ime_transposed", "simulation": {"n_train": 20}}))
    cfg = RunConfig.load(path, ["seed=5", "solver.time_limit=12.5", "estimation.init_state=flat",
                                "pinned=[\"l1\"]"])
    assert cfg.mode == est.IME_TRANSPOSED
    assert cfg["seed"] == 5 and cfg.solver_options().time_limit == 12.5
    assert cfg.simulation_settings().n_train == 20 and cfg.simulation_settings().n_validation == 10
    assert cfg.build_options().pinned == frozenset({"l1"})
    assert cfg.out == tmp_path / "out"


def test_alpha_overrides_accept_new_keys():
    data = apply_overrides({"alpha_overrides": {}}, ["alpha_overrides.alpha1_R=3.5"])
    assert data["alpha_overrides"] == {"alpha1_R": 3.5}


@pytest.mark.parametrize("overrides", [["colour=red"], ["solver.speed=1"], ["seed"], ["seed=\"x\""],
                                       ["mode=kalman"], ["solver.tol=-1"], ["estimation.length_residuals=\"x\""]])
def test_bad_overrides_rejected(overrides):
    with pytest.raises(ConfigError):
        RunConfig.load(None, overrides)


def test_bad_files_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(tmp_path / "broken.json")
    (tmp_path / "extra.json").write_text(json.dumps({"simulation": {"n_trains": 3}}))
    with pytest.raises(ConfigError, match="simulation.n_trains"):
        RunConfig.load(tmp_path / "extra.json")


def test_require_reports_missing_files(tmp_path):
    cfg = RunConfig.load(None, [f"out={json.dumps(str(tmp_path))}"])
    with pytest.raises(ConfigError, match="required"):
        cfg.require("feeder")
    with pytest.raises(ConfigError, match="does not exist"):
        cfg.require(("train", "train.csv"))
    (tmp_path / "train.csv").write_text("")
    assert cfg.require(("train", "train.csv")) == [tmp_path / "train.csv"]
