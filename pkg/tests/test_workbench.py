import json

import pandas as pd
import pytest

from conftest import ROOT, chain_netlist
from data_loader import OUT_DIR_ENV, read_csv, save_netlist
from workbench import main

LIBRARY = ROOT / "data" / "refcell.json"
IDEAL = {"idc": 0.0, "p_m": 0.0, "p_rs": 0.0, "p_rm": 1.0}


@pytest.fixture(autouse=True)
def _no_env_out_dir(monkeypatch):
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)


def _config(tmp_path, **fields):
    save_netlist(chain_netlist(), tmp_path / "chain.json")
    raw = {
        "netlists": ["chain.json"],
        "library": str(LIBRARY),
        "trials": {"ssta": 256},
        "search": {"k_max": 4},
        "output_dir": "out",
        **fields,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def test_gen_is_reproducible(tmp_path):
    assert main(["gen", "--gates", "1", "--out", str(tmp_path / "one.json")]) == 0
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen", "--gates", "50", "--seed", "3", "--out", str(a)]) == 0
    assert main(["gen", "--gates", "50", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_missing_library_exits_with_input_error(tmp_path):
    path = _config(tmp_path, library="missing.json")
    assert main(["analyze", "--config", str(path)]) == 2
    assert main(["optimize", "--config", str(tmp_path / "absent.json")]) == 2


def test_bad_worker_count(tmp_path):
    assert main(["analyze", "--config", str(_config(tmp_path)), "--workers", "0"]) == 2


def test_analyze_writes_reports(tmp_path):
    path = _config(tmp_path)
    assert main(["analyze", "--config", str(path), "--dump-constraints"]) == 0
    out = tmp_path / "out" / "chain"
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["schema_version"] == 1
    assert summary["module"] == "chain"
    assert summary["ideal_driver_constraints"] == 2
    assert set(summary["point"]["gradients"]) == {"energy", "t95", "pnmv", "edp95", "enp"}
    assert len(read_csv(out / "delay_cdf.csv")) == 256
    elimination = json.loads((out / "constraint_elimination.json").read_text(encoding="utf-8"))
    assert elimination["total"] == 6
    assert (out / "k_tilde_triplets.csv").read_text(encoding="utf-8").startswith("# schema_version: 1\n")
    assert len(read_csv(out / "constraints.csv")) == 6


def test_analyze_is_deterministic_across_workers(tmp_path):
    path = _config(tmp_path)
    assert main(["analyze", "--config", str(path), "--out", str(tmp_path / "w1"), "--workers", "1"]) == 0
    assert main(["analyze", "--config", str(path), "--out", str(tmp_path / "w2"), "--workers", "2"]) == 0
    for name in ("summary.json", "delay_cdf.csv", "constraint_elimination.json"):
        assert (tmp_path / "w1" / "chain" / name).read_bytes() == (tmp_path / "w2" / "chain" / name).read_bytes()


def test_seed_override_changes_the_sample(tmp_path):
    path = _config(tmp_path)
    assert main(["analyze", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["analyze", "--config", str(path), "--out", str(tmp_path / "b"), "--seed-override", "7"]) == 0
    a = (tmp_path / "a" / "chain" / "delay_cdf.csv").read_bytes()
    b = (tmp_path / "b" / "chain" / "delay_cdf.csv").read_bytes()
    assert a != b


def test_optimize_at_ideal_processing_emits_route(tmp_path):
    path = _config(tmp_path, processing=IDEAL, node_label="5nm")
    assert main(["optimize", "--config", str(path)]) == 0
    out = tmp_path / "out"
    route = read_csv(out / "route.csv")
    assert list(route.columns) == ["node_label", "v_dd", "idc", "p_m", "p_rs", "p_rm"]
    assert route.loc[0, "node_label"] == "5nm"
    search = json.loads((out / "chain" / "search.json").read_text(encoding="utf-8"))
    assert search["selected"]["processing"] == IDEAL
    assert not read_csv(out / "chain" / "trajectory.csv").empty
    summary = json.loads((out / "route.json").read_text(encoding="utf-8"))
    assert summary["relative_improvement"] == "no improvement"
    assert all(row["acceptable"] for row in summary["revalidation"])


def test_optimize_infeasible_exits_one(tmp_path):
    path = _config(tmp_path, technology={"snm_r": 0.12},
                   search={"k_max": 2, "frozen_params": ["idc", "p_m", "p_rs"]})
    assert main(["optimize", "--config", str(path)]) == 1
    report = json.loads((tmp_path / "out" / "chain" / "infeasible.json").read_text(encoding="utf-8"))
    assert report["pareto"]
    assert not (tmp_path / "out" / "route.csv").exists()


def test_mvncdf_subcommand(tmp_path):
    problem = tmp_path / "p.txt"
    problem.write_text("1.0 0.5 0.0\n0.5 1.0 0.0\n", encoding="utf-8")
    out = tmp_path / "p.json"
    assert main(["mvncdf", "--problem", str(problem), "--target", "1e-6", "--out", str(out)]) == 0
    result = json.loads(out.read_text(encoding="utf-8"))
    assert result["dim"] == 2
    assert result["prob"] == pytest.approx(1 / 3, abs=1e-5)


def test_mvncdf_rejects_malformed_matrix(tmp_path):
    problem = tmp_path / "p.txt"
    problem.write_text("1.0 x\n", encoding="utf-8")
    assert main(["mvncdf", "--problem", str(problem)]) == 2


@pytest.mark.slow
def test_validate_writes_reports(tmp_path):
    path = _config(
        tmp_path,
        trials={"ssta": 512, "pnmv_mc": 20_000},
        validation={
            "processing_sets": [{"idc": 0.5, "p_m": 0.01, "p_rs": 0.05}, {"idc": 0.1, "p_m": 0.05, "p_rs": 0.05}],
            "k_values": [0, 1, 2],
            "idc_sweep": [0.5, 1.0],
            "pnmv_snm_r": 0.12,
        },
    )
    assert main(["validate", "--config", str(path)]) in (0, 1)
    out = tmp_path / "out"
    report = json.loads((out / "validation.json").read_text(encoding="utf-8"))
    assert set(report["chain"]["checks"]) == {"edp95_suboptimality", "median_error", "spread_error",
                                              "pnmv_rms_pct_error"}
    assert len(read_csv(out / "chain" / "linear_vs_nonlinear.csv")) == 6
    assert "cv" in read_csv(out / "chain" / "pnmv_vs_mc.csv").columns
    assert (out / "validation_timing.json").exists()


@pytest.mark.parametrize(("speedup", "code"), [(40.0, 0), (3.0, 1)])
def test_validate_exit_code_follows_speedup_floor(tmp_path, monkeypatch, speedup, code):
    grid = pd.DataFrame({"k_sel_upsize": [0]})
    monkeypatch.setattr("workbench.linear_vs_nonlinear", lambda *a, **kw: (grid, {
        "edp95_suboptimality": 0.0, "speedup": speedup, "linear_time_s": 1.0, "nonlinear_time_s": speedup}))
    monkeypatch.setattr("workbench.gaussian_vs_discrete", lambda *a, **kw: {"median_error": 0.0, "spread_error": 0.0})
    monkeypatch.setattr("workbench.pnmv_vs_mc", lambda *a, **kw: (grid, {"rms_pct_error": 0.0}))
    path = _config(tmp_path, validation={"speedup_min": 10.0})
    assert main(["validate", "--config", str(path)]) == code
    out = tmp_path / "out"
    report = json.loads((out / "validation.json").read_text(encoding="utf-8"))
    assert report["chain"]["passed"]
    timing = json.loads((out / "validation_timing.json").read_text(encoding="utf-8"))
    assert timing["chain"]["speedup_ok"] is (code == 0)
