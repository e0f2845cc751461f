from typing import Dict

import pytest
from ensemble_tracking.cli import Commands, run_cli
from ensemble_tracking.synthetic import GROUNDTRUTH_FILE

from tests.resources.evaluation import ope_three_frames, presence_six_frames
from tests.tools import RESOURCE_PATH

EVALUATION_PATH = RESOURCE_PATH / "evaluation"
DESK_CONFIG = RESOURCE_PATH / "desk.cfg"


def _summary(output: str) -> Dict[str, str]:
    return dict(line.split("=", 1) for line in output.splitlines() if "=" in line)


def _eval_args(fixture: str, mode: str):
    root = EVALUATION_PATH / fixture
    return [
        "eval",
        f"--dataset={root / 'dataset'}",
        f"--results={root / 'results'}",
        f"--mode={mode}",
    ]


def test_eval_ope(capsys):
    assert run_cli(_eval_args("ope", "ope")) == 0
    summary = _summary(capsys.readouterr().out)

    assert summary["mode"] == "ope"
    assert summary["sequences"] == "1"
    expected = (ope_three_frames.AUC, ope_three_frames.PRECISION)
    assert (float(summary["auc"]), float(summary["precision"])) == pytest.approx(
        expected, abs=1e-6
    )
    assert float(summary["normalized_precision"]) == pytest.approx(
        ope_three_frames.NORMALIZED_PRECISION, abs=1e-6
    )
    assert float(summary["iou_rate"]) == pytest.approx(2 / 3, abs=1e-6)


@pytest.mark.parametrize(
    "mode, keys, expected",
    [
        pytest.param(
            "votlt", ("precision", "recall", "fscore"), presence_six_frames.VOTLT, id="votlt"
        ),
        pytest.param("oxuva", ("tpr", "tnr", "maxgm"), presence_six_frames.OXUVA, id="oxuva"),
    ],
)
def test_eval_presence(capsys, mode, keys, expected):
    assert run_cli(_eval_args("presence", mode)) == 0
    summary = _summary(capsys.readouterr().out)
    assert summary["mode"] == mode
    assert tuple(float(summary[key]) for key in keys) == pytest.approx(expected, abs=1e-6)


def test_unknown_mode(capsys):
    assert run_cli(_eval_args("ope", "lasot")) == 2
    assert "Usage: ensemble-tracking eval" in capsys.readouterr().err


def test_eval_reports_reacquisition(tmp_path, capsys):
    sequence = tmp_path / "dataset" / "seq-000"
    sequence.mkdir(parents=True)
    (sequence / GROUNDTRUTH_FILE).write_text(
        "0,10,10,20,20,1\n1,12,10,20,20,1\n2,0,0,0,0,0\n3,40,30,20,20,1\n4,42,30,20,20,1\n"
    )
    (tmp_path / "results").mkdir()
    (tmp_path / "results" / "seq-000.txt").write_text(
        "0,10.000,10.000,20.000,20.000,1.000000,1\n"
        "1,12.000,10.000,20.000,20.000,0.900000,1\n"
        "2,12.000,10.000,20.000,20.000,0.100000,0\n"
        "3,12.000,10.000,20.000,20.000,0.200000,0\n"
        "4,42.000,30.000,20.000,20.000,0.800000,1\n"
    )
    args = [f"--dataset={tmp_path / 'dataset'}", f"--results={tmp_path / 'results'}"]
    assert run_cli(["eval", *args, "--mode=votlt"]) == 0
    summary = _summary(capsys.readouterr().out)
    assert float(summary["reacquisition_rate"]) == 1.0

    assert run_cli(_eval_args("ope", "ope")) == 0
    assert "reacquisition_rate" not in _summary(capsys.readouterr().out)


def test_temporal_transfer_flag():
    settings = Commands(config=str(DESK_CONFIG), temporal_transfer=False).settings
    assert settings.runtime.temporal_transfer is False
    assert settings.training.temporal_transfer is False
    assert Commands(config=str(DESK_CONFIG)).settings.runtime.temporal_transfer is True


def test_usage_errors():
    assert run_cli(["eval", "--dataset=a"]) == 2
    assert run_cli(["no-such-command"]) == 2


def test_missing_dataset(tmp_path):
    args = ["eval", f"--dataset={tmp_path / 'missing'}", f"--results={tmp_path}"]
    assert run_cli(args) == 1


def test_bad_config(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("unknown_key = 1\n")
    assert run_cli([f"--config={path}", "synth", f"--output={tmp_path / 'data'}"]) == 1


def test_synth(tmp_path, capsys):
    output = tmp_path / "data"
    args = [f"--config={DESK_CONFIG}", "synth", f"--output={output}", "--count=2"]
    assert run_cli(args) == 0

    summary = _summary(capsys.readouterr().out)
    assert summary["sequences"] == "2"
    assert summary["frames"] == "16"
    for name in ("seq-000", "seq-001"):
        assert (output / name / GROUNDTRUTH_FILE).is_file()
        assert len(list((output / name).glob("*.png"))) == 8


def test_gradcheck(capsys):
    assert run_cli(["gradcheck"]) == 0
    summary = _summary(capsys.readouterr().out)
    assert summary["passed"] == "1"
    assert summary["tca_forward.passed"] == "1"


@pytest.mark.slow
def test_synth_train_track_eval(tmp_path, capsys):
    config = f"--config={DESK_CONFIG}"
    dataset, checkpoint = tmp_path / "data", tmp_path / "model.pt"

    assert run_cli([config, "synth", f"--output={dataset}", "--count=2"]) == 0
    log = tmp_path / "train.log"
    train = [config, "train", f"--checkpoint={checkpoint}", f"--dataset={dataset}", f"--log={log}"]
    assert run_cli(train) == 0
    assert checkpoint.is_file()
    assert len(log.read_text().splitlines()) == 4

    for run in ("first", "second"):
        args = [config, "track", f"--checkpoint={checkpoint}", f"--dataset={dataset}"]
        assert run_cli([*args, f"--results={tmp_path / run}"]) == 0
    first = (tmp_path / "first" / "seq-000.txt").read_bytes()
    assert first == (tmp_path / "second" / "seq-000.txt").read_bytes()
    assert len(first.decode().splitlines()) == 8

    capsys.readouterr()
    args = [config, "eval", f"--dataset={dataset}", f"--results={tmp_path / 'first'}"]
    assert run_cli([*args, "--mode=oxuva"]) == 0
    summary = _summary(capsys.readouterr().out)
    assert summary["sequences"] == "2"
    assert 0.0 <= float(summary["maxgm"]) <= 1.0

    overlay = tmp_path / "overlay"
    args = [config, "overlay", f"--dataset={dataset}", f"--results={tmp_path / 'first'}"]
    assert run_cli([*args, f"--output={overlay}", "--sequence=seq-001"]) == 0
    assert len(list((overlay / "seq-001").glob("*.png"))) == 8
