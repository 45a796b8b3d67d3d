import json
import os

import pytest

from main import main
from src.checkpoints import load_checkpoint
from src.config import load_run_config
from src.dataset import load_config, load_dataset
from src.trainer import run_stage

RUN_CONFIG = """\
INPUT_HEIGHT=64
INPUT_WIDTH=48
SCORE_FLOOR=0.0
MAX_DETECTIONS=3
TRAIN_FRAMES=1
BATCH_SIZE=4
NUM_FRAMES=2
NUM_PERSONS=2
HIDDEN_WIDTH=16
FAMILIES=frame,instance,part,state,video_t,video_s
VIDEO_PROVIDER=stub
PART_PARSER_LR=0.001
"""


def _synth(tmp_path) -> str:
    data_dir = str(tmp_path / "data")
    code = main(["synth", "--out", data_dir, "--videos-per-class", "2", "--num-actions", "2",
                 "--num-parts", "2", "--num-states", "2", "--seed", "0"])
    assert code == 0
    return data_dir


def _config(tmp_path) -> str:
    path = tmp_path / "run.env"
    path.write_text(RUN_CONFIG + f"FEATURE_CACHE={tmp_path / 'cache'}\n", encoding="utf-8")
    return str(path)


def test_synth_writes_splits_and_frames(tmp_path):
    data_dir = _synth(tmp_path)
    train = load_dataset(os.path.join(data_dir, "train.json"))
    minival = load_dataset(os.path.join(data_dir, "minival.json"))
    assert len(train) == 3 and len(minival) == 1
    assert len(os.listdir(os.path.join(data_dir, "frames"))) == 4
    assert load_config(os.path.join(data_dir, "all.json")).state_names == ("none", "swing_vertical")


def test_full_pipeline_from_synthesis_to_diagnosis(tmp_path):
    data_dir = _synth(tmp_path)
    config = _config(tmp_path)
    ckpt_dir = str(tmp_path / "ckpt")
    train_json = os.path.join(data_dir, "train.json")
    minival_json = os.path.join(data_dir, "minival.json")

    for stage, epochs in (("detector", "0"), ("part_parser", "1"), ("action_parser", "1")):
        code = main(["train", stage, "--config", config, "--dataset", train_json, "--out", ckpt_dir,
                     "--epochs", epochs])
        assert code == 0
        assert os.path.exists(os.path.join(ckpt_dir, f"{stage}.pt"))

    action = load_checkpoint(os.path.join(ckpt_dir, "action_parser.pt"), "action_parser")
    assert "video_model" in action.state and "member_0" in action.state
    assert action.settings["members"] == [["frame", "instance", "part", "state", "video_t", "video_s"]]

    pred_a, pred_b = str(tmp_path / "pred_a.json"), str(tmp_path / "pred_b.json")
    for out in (pred_a, pred_b):
        code = main(["predict", "--config", config, "--checkpoints", ckpt_dir, "--dataset", minival_json,
                     "--out", out])
        assert code == 0
    with open(pred_a, "rb") as a, open(pred_b, "rb") as b:
        assert a.read() == b.read()
    predictions = load_dataset(pred_a, predictions=True)
    assert [p.video_id for p in predictions] == [v.video_id for v in load_dataset(minival_json)]

    report = str(tmp_path / "reports" / "metrics.json")
    assert main(["evaluate", "--pred", pred_a, "--gt", minival_json, "--out", report]) == 0
    metrics = json.loads(open(report, encoding="utf-8").read())
    assert 0.0 <= metrics["Acc^p"] <= metrics["Acc"] <= 1.0

    grid_path = str(tmp_path / "reports" / "grid.json")
    assert main(["diagnose", "--pred", pred_a, "--gt", minival_json, "--out", grid_path,
                 "--flags", "actor_det,part_det,state_parsing,action_parsing",
                 "--plot", str(tmp_path / "grid.png")]) == 0
    grid = json.loads(open(grid_path, encoding="utf-8").read())
    assert len(grid["rows"]) == 11
    assert grid["rows"][-1]["acc_p"] == 1.0
    assert grid["restricted"]["acc_p"] == 1.0

    merged = str(tmp_path / "merged.json")
    assert main(["ensemble", pred_a, pred_b, "--weights", "1,3", "--out", merged]) == 0
    assert load_dataset(merged, predictions=True)[0].action_scores == pytest.approx(predictions[0].action_scores)


def test_action_stage_needs_upstream_checkpoints(tmp_path):
    data_dir = _synth(tmp_path)
    code = main(["train", "action_parser", "--config", _config(tmp_path),
                 "--dataset", os.path.join(data_dir, "train.json"), "--out", str(tmp_path / "empty")])
    assert code == 1


def test_zero_epochs_still_writes_a_checkpoint(tmp_path):
    data_dir = _synth(tmp_path)
    cfg = load_run_config("part_parser", _config(tmp_path),
                          overrides={"epochs": 0, "dataset": os.path.join(data_dir, "train.json"),
                                     "out_dir": str(tmp_path / "ckpt")})
    checkpoint = run_stage(cfg, show_progress=False)
    assert checkpoint.epoch == 0 and checkpoint.metrics["history"] == []
    assert os.path.exists(cfg.checkpoint_path())


def test_detector_epoch_records_losses_and_rate(tmp_path):
    data_dir = _synth(tmp_path)
    cfg = load_run_config("detector", _config(tmp_path),
                          overrides={"epochs": 1, "dataset": os.path.join(data_dir, "train.json"),
                                     "out_dir": str(tmp_path / "ckpt")})
    history = run_stage(cfg, show_progress=False).metrics["history"]
    assert len(history) == 1
    assert history[0]["lr"] == 0.02
    assert {"l_cls", "l_box", "l_ins", "l_img", "l_det"} <= set(history[0])


def test_errors_exit_with_status_one(tmp_path):
    missing = str(tmp_path / "missing.json")
    assert main(["evaluate", "--pred", missing, "--gt", missing]) == 1
