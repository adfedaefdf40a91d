import json

import numpy as np
import pytest

from cli_helpers import run, run_all, small_config
from snspdsim import fcnn
from snspdsim.cli import main
from snspdsim.experiments import read_feature_csv


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    return small_config(tmp_path_factory.mktemp("cfg") / "small.json")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, small):
    d = tmp_path_factory.mktemp("run")
    return d, run_all(d, small)


def test_every_subcommand_writes_its_outputs(pipeline):
    d, digests = pipeline
    expected = {"trace.csv", "events.csv", "bias.csv", "train.csv", "train.csv.meta.json", "test.csv",
                "test.csv.meta.json", "model.json", "eval.json", "wl.csv", "wl.summary.json", "pol.csv",
                "pol.summary.json", "emitter.csv", "emitter.summary.json", "hidden.csv"}
    assert set(digests) == expected
    assert not list(d.glob(".*.tmp"))


def test_rerun_is_byte_identical(tmp_path, small, pipeline):
    assert run_all(tmp_path, small) == pipeline[1]


def test_output_headers(pipeline):
    d, _ = pipeline
    assert (d / "trace.csv").read_text().startswith("t_ns,adc_code\n")
    assert (d / "bias.csv").read_text().startswith("bias_a,count_rate_hz\n")
    assert (d / "wl.csv").read_text().splitlines()[0] == "delta_nm,accuracy"
    assert (d / "emitter.csv").read_text().startswith("bin_center_s,counts_all,counts_filtered,fit_all,fit_filtered\n")
    summary = json.loads((d / "emitter.summary.json").read_text())
    assert set(summary) == {"config_hash", "seed", "metrics"} and summary["seed"] == 11


def test_model_carries_calibration_reference(pipeline):
    d, _ = pipeline
    model = fcnn.load_model(d / "model.json")
    meta = json.loads((d / "train.csv.meta.json").read_text())
    assert model.calibration == meta["reference"]


def test_eval_matches_recount(pipeline, capsys):
    d, _ = pipeline
    assert run("eval", "--model", d / "model.json", "--dataset", d / "test.csv") == 0
    printed = float(capsys.readouterr().out.strip().split("accuracy=")[1])
    model = fcnn.load_model(d / "model.json")
    ds = read_feature_csv(d / "test.csv")
    hits = sum(int(np.argmax(fcnn.forward(model, x)) == t) for x, t in zip(ds.inputs, ds.targets))
    assert printed == pytest.approx(hits / len(ds), abs=5e-7)
    stored = json.loads((d / "eval.json").read_text())["metrics"]["accuracy"]
    assert stored == hits / len(ds)


def test_sweep_bias_reports_selected_bias(tmp_path, capsys):
    assert run("sweep-bias", "--out", tmp_path / "b.csv") == 0
    assert "selected_bias_mA=0.0700" in capsys.readouterr().out


def test_print_config_round_trips(capsys):
    assert main(["--print-config"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["seed"] == 42 and data["physics"]["t_c"] == 3.4


def test_unwritable_output_exits_2_without_partial_file(tmp_path, small):
    missing = tmp_path / "nope" / "trace.csv"
    assert run("simulate", "--config", small, "--duration", 0.001, "--out", missing) == 2
    assert not missing.parent.exists()
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        code = run("sweep-bias", "--out", locked / "b.csv")
        if code == 0:
            pytest.skip("running with privileges that ignore directory permissions")
        assert code == 2
        assert list(locked.iterdir()) == []
    finally:
        locked.chmod(0o700)


def test_directory_as_output_exits_2(tmp_path):
    assert run("sweep-bias", "--out", tmp_path) == 2


@pytest.mark.parametrize("text", ["{", '{"format_version": 1}', '{"format_version": 9, "physics": {}}',
                                  '{"format_version": 1, "physics": {"c_e": -1}}'])
def test_bad_config_exits_2(tmp_path, text):
    bad = tmp_path / "bad.json"
    bad.write_text(text)
    assert run("sweep-bias", "--config", bad, "--out", tmp_path / "b.csv") == 2
    assert not (tmp_path / "b.csv").exists()


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["--seed", "-3", "sweep-bias"],
                                  ["sweep-bias", "--seed", str(2 ** 64)], ["dataset", "--scenario", "x"]])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_missing_model_file_exits_2(tmp_path):
    assert run("eval", "--model", tmp_path / "none.json", "--dataset", tmp_path / "none.csv") == 2


def test_corrupt_model_exits_nonzero(tmp_path, pipeline):
    d, _ = pipeline
    (tmp_path / "m.json").write_text('{"arch": [')
    assert run("eval", "--model", tmp_path / "m.json", "--dataset", d / "test.csv") in (1, 2)


def test_different_seed_changes_outputs(tmp_path, small, pipeline):
    assert run("simulate", "--config", small, "--seed", 12, "--duration", 0.002,
               "--out", tmp_path / "trace.csv") == 0
    assert (tmp_path / "trace.csv").read_bytes() != (pipeline[0] / "trace.csv").read_bytes()
