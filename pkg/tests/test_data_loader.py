import json

import numpy as np
import pandas as pd
import pytest

from conftest import ROOT, chain_netlist
from data_loader import (OUT_DIR_ENV, Seeds, load_library, load_netlist, load_run_config, read_csv, save_library,
                         save_netlist, write_csv, write_json)
from errors import InputError

LIBRARY = ROOT / "data" / "refcell.json"


@pytest.fixture(autouse=True)
def _no_env_out_dir(monkeypatch):
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)


@pytest.fixture
def workspace(tmp_path):
    save_netlist(chain_netlist(), tmp_path / "chain.json")
    return tmp_path


def _config(workspace, **fields):
    raw = {"netlists": ["chain.json"], "library": str(LIBRARY), "output_dir": "results", **fields}
    path = workspace / "run.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def test_config_paths_resolve_against_config_dir(workspace):
    config = load_run_config(_config(workspace))
    assert config.netlists == [workspace / "chain.json"]
    assert config.output_dir == workspace / "results"
    assert config.trials.ssta == 2000
    assert config.technology.snm_r == pytest.approx(0.07)


def test_missing_library_names_the_field(workspace):
    with pytest.raises(InputError, match="config field library"):
        load_run_config(_config(workspace, library="nowhere.json"))


def test_missing_netlist_names_the_field(workspace):
    with pytest.raises(InputError, match=r"netlists\[1\]"):
        load_run_config(_config(workspace, netlists=["chain.json", "gone.json"]))


def test_invalid_field_names_the_field(workspace):
    with pytest.raises(InputError, match="trials.ssta"):
        load_run_config(_config(workspace, trials={"ssta": 10}))
    with pytest.raises(InputError, match="processing.p_m"):
        load_run_config(_config(workspace, processing={"p_m": 2.0}))


def test_missing_or_broken_config(tmp_path):
    with pytest.raises(InputError, match="file not found"):
        load_run_config(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(InputError, match="not valid JSON"):
        load_run_config(broken)


def test_output_dir_precedence(workspace, monkeypatch):
    path = _config(workspace)
    monkeypatch.setenv(OUT_DIR_ENV, str(workspace / "from_env"))
    assert load_run_config(path).output_dir == workspace / "from_env"
    assert load_run_config(path, out_dir=workspace / "flag").output_dir == workspace / "flag"


def test_seed_aliases_and_override(workspace):
    config = load_run_config(_config(workspace, seeds={"yield": 5, "mvn": 2}))
    assert config.seeds.yield_ == 5
    assert config.seeds.mvn == 2
    overridden = load_run_config(_config(workspace), seed_override=11)
    assert overridden.seeds == Seeds.derived(11)
    assert overridden.seeds != Seeds.derived(12)


def test_library_round_trip(tmp_path):
    library = load_library(LIBRARY)
    save_library(library, tmp_path / "copy.json")
    assert load_library(tmp_path / "copy.json") == library


def test_bad_library_format(tmp_path):
    raw = json.loads(LIBRARY.read_text(encoding="utf-8"))
    raw["format"] = "other/9"
    path = tmp_path / "lib.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    with pytest.raises(InputError, match="format"):
        load_library(path)


def test_netlist_round_trip(tmp_path):
    save_netlist(chain_netlist(length=4), tmp_path / "n.json")
    assert load_netlist(tmp_path / "n.json") == chain_netlist(length=4)


def test_json_carries_schema_version(tmp_path):
    path = write_json(tmp_path / "sub" / "out.json",
                      {"value": np.float64(1.5), "bad": float("nan"), "arr": np.arange(3), "where": tmp_path})
    document = json.loads(path.read_text(encoding="utf-8"))
    assert next(iter(document)) == "schema_version"
    assert document["value"] == 1.5
    assert document["bad"] is None
    assert document["arr"] == [0, 1, 2]
    assert document["where"] == str(tmp_path)


def test_csv_carries_schema_version(tmp_path):
    frame = pd.DataFrame({"a": [1, 2], "b": [0.5, 0.25]})
    path = write_csv(tmp_path / "t.csv", frame)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "# schema_version: 1"
    pd.testing.assert_frame_equal(read_csv(path), frame)
