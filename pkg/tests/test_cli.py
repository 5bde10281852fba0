"""End-to-end checks of the command-line interface.

These call ``dispatch`` in-process so exit codes and console output are
asserted directly; a couple of slower cases run the datagen/train chain
on a single configuration.
"""

import hashlib
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pandas as pd
import pytest

from ccrc_sched import cli
from ccrc_sched import dataforge as df
from ccrc_sched.grid import default_topology, topology_to_dict

TOPO = default_topology()


@pytest.fixture(scope="module")
def op_json(tmp_path_factory):
    path = tmp_path_factory.mktemp("op") / "op.json"
    op = df.lhs_sample(TOPO.operating_ranges, 4, seed=2)[0]
    path.write_text(json.dumps(op.to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def grid_json(tmp_path_factory):
    path = tmp_path_factory.mktemp("grid") / "grid.json"
    path.write_text(json.dumps(topology_to_dict(TOPO)))
    return str(path)


def _manifest(outdir: Path) -> dict:
    return json.loads((outdir / "run_manifest.json").read_text())


def test_enumerate_prints_counts(tmp_path, capsys):
    assert cli.dispatch(["enumerate", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip() == "729 total / 95 feasible"
    frame = pd.read_csv(tmp_path / "ccrcs.csv")
    assert len(frame) == 95
    assert frame["ccrc_id"].is_unique


def test_manifest_records_artifact_hashes(tmp_path):
    cli.dispatch(["enumerate", "--out", str(tmp_path)])
    doc = _manifest(tmp_path)
    digest = hashlib.sha256((tmp_path / "ccrcs.csv").read_bytes()).hexdigest()
    assert doc["artifacts"]["ccrcs.csv"] == digest
    assert doc["command"] == "enumerate"
    assert doc["jobs"] == 1


def test_grid_file_round_trip(tmp_path, capsys, grid_json):
    assert cli.dispatch(["enumerate", "--grid", grid_json,
                         "--out", str(tmp_path)]) == 0
    assert "729 total / 95 feasible" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert cli.dispatch(["enumerate", "--bogus"]) == 2
    assert cli.dispatch(["not-a-command"]) == 2
    capsys.readouterr()


def test_version_flag(capsys):
    assert cli.dispatch(["--version"]) == 0
    capsys.readouterr()


def test_missing_input_file_is_numeric_failure(tmp_path, capsys):
    rc = cli.dispatch(["powerflow", "--op", str(tmp_path / "nope.json"),
                       "--ccrc", "59", "--out", str(tmp_path)])
    assert rc == 1
    assert "error[FileNotFoundError]" in capsys.readouterr().err


def test_powerflow_writes_bus_table(tmp_path, capsys, op_json):
    rc = cli.dispatch(["powerflow", "--op", op_json, "--ccrc", "59",
                       "--out", str(tmp_path)])
    assert rc == 0
    assert "converged in" in capsys.readouterr().out
    frame = pd.read_csv(tmp_path / "powerflow.csv")
    assert {"v_mag_pu", "v_dc_pu", "p_gen_pu", "ipc_loss_pu"} <= set(
        frame["quantity"])


def test_powerflow_infeasible_ccrc_fails_cleanly(tmp_path, capsys, op_json):
    rc = cli.dispatch(["powerflow", "--op", op_json, "--ccrc", "13",
                       "--out", str(tmp_path)])
    assert rc == 1
    assert "error[" in capsys.readouterr().err


def test_assess_prints_label_and_indicators(tmp_path, capsys, op_json):
    rc = cli.dispatch(["assess", "--op", op_json, "--ccrc", "59",
                       "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    for token in ("upsilon=", "abscissa=", "h2_f=", "h2_vdc=", "k_f=",
                  "k_vdc="):
        assert token in out


def test_indicators_rerun_and_jobs_invariance(tmp_path, capsys):
    argv = ["indicators", "--ccrcs", "59", "--n-ops", "3",
            "--ops-seed", "4"]
    outs = [tmp_path / n for n in ("a", "b", "j2")]
    assert cli.dispatch(argv + ["--jobs", "1", "--out", str(outs[0])]) == 0
    assert cli.dispatch(argv + ["--jobs", "1", "--out", str(outs[1])]) == 0
    assert cli.dispatch(argv + ["--jobs", "2", "--out", str(outs[2])]) == 0
    capsys.readouterr()
    ref = (outs[0] / "indicator_table.csv").read_bytes()
    assert (outs[1] / "indicator_table.csv").read_bytes() == ref
    assert (outs[2] / "indicator_table.csv").read_bytes() == ref
    doc = _manifest(outs[0])
    assert doc["seeds"] == {"ops_seed": 4}


def test_indicators_rejects_infeasible_id(tmp_path, capsys):
    rc = cli.dispatch(["indicators", "--ccrcs", "13", "--n-ops", "2",
                       "--ops-seed", "1", "--out", str(tmp_path)])
    assert rc == 1
    assert "not feasible" in capsys.readouterr().err


def test_reduce_writes_maps_and_selection(tmp_path, capsys):
    rc = cli.dispatch(["reduce", "--ccrcs", "59,239,481", "--n-ops", "4",
                       "--ops-seed", "2", "--n-regions", "2", "--seed", "0",
                       "--jobs", "2", "--out", str(tmp_path)])
    assert rc == 0
    capsys.readouterr()
    doc = json.loads((tmp_path / "reduced_set.json").read_text())
    assert set(doc["reduced"]) <= {59, 239, 481}
    assert doc["indicators"] == ["h2_f", "h2_vdc", "k_f", "k_vdc"]
    for name in ("map_h2_f.svg", "map_h2_f.csv", "membership.svg",
                 "indicator_table.csv"):
        assert (tmp_path / name).exists()
    ET.parse(tmp_path / "map_h2_f.svg")


def test_plot_kinds_render_svg(tmp_path, capsys):
    src = tmp_path / "data.csv"
    pd.DataFrame({"x": [0, 1, 2], "a": [1.0, 2.0, 1.5],
                  "b": [3.0, 2.5, 2.0], "g": ["u", "v", "u"]}).to_csv(
        src, index=False)
    for kind, extra in (("series", ["--y", "a,b"]),
                        ("scatter", ["--y", "a", "--group", "g"]),
                        ("bars", ["--y", "a,b"])):
        rc = cli.dispatch(["plot", "--csv", str(src), "--kind", kind,
                           "--x", "x", "--name", f"p_{kind}",
                           "--out", str(tmp_path)] + extra)
        assert rc == 0
        ET.parse(tmp_path / f"p_{kind}.svg")
    capsys.readouterr()


def test_plot_rejects_missing_column(tmp_path, capsys):
    src = tmp_path / "data.csv"
    pd.DataFrame({"x": [0, 1]}).to_csv(src, index=False)
    rc = cli.dispatch(["plot", "--csv", str(src), "--x", "x", "--y", "zz",
                       "--out", str(tmp_path)])
    assert rc == 1
    assert "error[ValueError]" in capsys.readouterr().err


def test_unknown_log_level_warns(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CCRC_SCHED_LOG", "silly")
    assert cli.dispatch(["enumerate", "--out", str(tmp_path)]) == 0
    assert "unknown CCRC_SCHED_LOG" in capsys.readouterr().err


def test_schedule_requires_bundle_for_data_driven(tmp_path, capsys):
    rc = cli.dispatch(["schedule", "--reduced", "59,239", "--mode",
                       "data-driven", "--slots", "2", "--scenario-seed", "1",
                       "--out", str(tmp_path)])
    assert rc == 1
    assert "error[ValueError]" in capsys.readouterr().err


def test_datagen_train_schedule_chain(tmp_path, capsys):
    data = tmp_path / "data"
    model = tmp_path / "model"
    sched = tmp_path / "sched"
    rc = cli.dispatch(["datagen", "--ccrcs", "239", "--budget", "80",
                       "--seed", "5", "--jobs", "1", "--out", str(data)])
    assert rc == 0
    assert (data / "pool.csv").exists()
    assert (data / "ind_239_h2_f.csv").exists()

    rc = cli.dispatch(["train", "--data", str(data), "--seed", "9",
                       "--out", str(model)])
    assert rc == 0
    assert (model / "bundle" / "bundle.json").exists()
    manifest = _manifest(model)
    assert any(k.startswith("bundle/") for k in manifest["artifacts"])

    rc = cli.dispatch(["schedule", "--reduced", "239,481", "--mode",
                       "data-driven", "--slots", "3", "--scenario-seed", "7",
                       "--bundle", str(model / "bundle"),
                       "--out", str(sched)])
    assert rc == 0
    capsys.readouterr()
    frame = pd.read_csv(sched / "schedule.csv")
    assert len(frame) == 3
    assert (frame["verified"] == 1).all()
    assert "t_solve" not in frame.columns


def test_benchmark_without_surrogate_modes(tmp_path, capsys):
    rc = cli.dispatch(["benchmark", "--reduced", "59,239", "--slots", "3",
                       "--scenario-seed", "11", "--modes", "exact,no-mcdm",
                       "--fallback-pair", "59,239",
                       "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "exact: agreement=1.000" in out
    summary = pd.read_csv(tmp_path / "benchmark_summary.csv")
    assert sorted(summary["mode"]) == ["exact", "no-mcdm"]
    for name in ("schedule_exact.csv", "schedule_no-mcdm.csv",
                 "role_sequences.svg", "timing_scatter.csv"):
        assert (tmp_path / name).exists()
