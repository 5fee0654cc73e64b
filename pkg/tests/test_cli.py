import json

import pytest

from bevda.cli import COMMANDS, run

SMALL = ["--set", "net.c_img=8", "--set", "net.c_depth=8", "--set", "net.c_bev=8",
         "--set", "mc_passes=2", "--set", "batch_size=2"]


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert run([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_command_suggests(capsys):
    assert run(["evl"]) == 2
    assert "eval" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path), "--bogus"]) == 2


def test_bad_choice_is_usage_error(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path), "--scenario", "fog"]) == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    assert run(["eval", "--out", str(tmp_path), "--checkpoint", "x", "--data", "y", "--set", "nope=1"]) == 2


def test_missing_input_is_runtime_failure(tmp_path, capsys):
    rc = run(["eval", "--out", str(tmp_path / "o"), "--checkpoint", str(tmp_path / "none.pt"),
              "--data", str(tmp_path / "none")])
    assert rc == 1
    assert "bevda eval" in capsys.readouterr().err


def test_no_command():
    assert run([]) == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--scenario", "weather", "--split", "src", "--n", "4", "--seed", "1",
                "--out", str(d / "src")]) == 0
    assert run(["gen-data", "--scenario", "weather", "--split", "tgt", "--n", "4", "--seed", "2",
                "--out", str(d / "tgt")]) == 0
    assert run(["pretrain", "--data", str(d / "src"), "--out", str(d / "pre"), "--epochs", "1", *SMALL]) == 0
    assert run(["adapt", "--source", str(d / "src"), "--target", str(d / "tgt"),
                "--checkpoint", str(d / "pre" / "checkpoint.pt"), "--out", str(d / "ad"),
                "--epochs", "1", "--no-va", *SMALL]) == 0
    assert run(["eval", "--checkpoint", str(d / "ad" / "checkpoint.pt"), "--data", str(d / "tgt"),
                "--out", str(d / "ev")]) == 0
    return d


def test_smoke_pipeline_writes_report(pipeline):
    rep = json.loads((pipeline / "ev" / "report.json").read_text())
    assert set(rep) >= {"ap", "mAP", "num_samples"}
    assert rep["num_samples"] == 4
    assert (pipeline / "ev" / "report.txt").read_text().count("mAP") == 1
    cfg = json.loads((pipeline / "ad" / "config.json").read_text())
    assert cfg["toggles"]["va"] is False and cfg["toggles"]["ba"] is True
    assert cfg["adapt_epochs"] == 1


def test_rerun_is_deterministic(pipeline):
    first = (pipeline / "ev" / "report.json").read_text()
    assert run(["eval", "--checkpoint", str(pipeline / "ad" / "checkpoint.pt"), "--data",
                str(pipeline / "tgt"), "--out", str(pipeline / "ev2")]) == 0
    a, b = json.loads(first), json.loads((pipeline / "ev2" / "report.json").read_text())
    a.pop("runtime_s"), b.pop("runtime_s")
    assert a == b


def test_gen_data_idempotent(pipeline, tmp_path):
    out = tmp_path / "again"
    assert run(["gen-data", "--split", "src", "--n", "4", "--seed", "1", "--out", str(out)]) == 0
    for f in sorted((pipeline / "src").iterdir()):
        assert (out / f.name).read_bytes() == f.read_bytes()


def test_plot_emits_files(pipeline):
    out = pipeline / "plots"
    rc = run(["plot", "--out", str(out), "--metrics", f"pre={pipeline / 'pre' / 'metrics.csv'}",
              "--metrics", str(pipeline / "ad" / "metrics.csv"),
              "--checkpoint", str(pipeline / "ad" / "checkpoint.pt"), "--scenario", "weather", "--n", "2",
              "--adapted", str(pipeline / "ad" / "checkpoint.pt"),
              "--source", str(pipeline / "src"), "--target", str(pipeline / "tgt")])
    assert rc == 0
    for name in ("loss_curves.png", "scenario_map.png", "prototypes.png"):
        assert (out / name).stat().st_size > 1000
    scores = json.loads((out / "scenario_map.json").read_text())
    assert set(scores["ad"]) == {"clean", "weather"}


def test_plot_without_inputs_is_usage_error(tmp_path):
    assert run(["plot", "--out", str(tmp_path)]) == 2
