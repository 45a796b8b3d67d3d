import json

import pytest

from src.evaluation import bottleneck_grid
from src.report import (
    CHECK,
    GRID_HEADERS,
    format_grid_table,
    format_metrics_table,
    grid_report,
    metrics_report,
    plot_history,
    write_report,
)
from tests.helpers import CONFIG, as_prediction, gt_video


def test_metrics_report_values():
    gt = [gt_video("a", 0), gt_video("b", 1)]
    preds = [as_prediction(gt[0]), as_prediction(gt[1], action_id=2)]
    report = metrics_report(preds, gt, CONFIG)
    assert report["videos"] == 2
    assert report["mAP"] == pytest.approx(1.0)
    assert report["Acc"] == pytest.approx(0.5)
    assert report["Acc^p"] == pytest.approx(0.5)
    assert report["per_class_accuracy"] == {"walk": 1.0, "wave": 0.0}
    table = format_metrics_table(report)
    assert "Acc^p" in table and "50.00%" in table and "Acc[walk]" in table


def test_grid_table_marks_substituted_stages():
    gt = [gt_video()]
    grid = bottleneck_grid([as_prediction(gt[0], action_id=0)], gt, num_actions=3, none_state=0)
    table = format_grid_table(grid)
    lines = table.splitlines()
    assert all(header in lines[0] for header in GRID_HEADERS)
    assert len(lines) == 2 + 11
    assert CHECK not in lines[2]
    assert lines[-1].count(CHECK) == 4 and lines[-1].endswith("100.00%")
    document = grid_report(grid)
    assert document["rows"][0]["label"] == "baseline"
    assert document["rows"][-1]["action_parsing"] is True


def test_write_report_writes_json_and_table(tmp_path):
    path = tmp_path / "reports" / "metrics.json"
    write_report(str(path), {"Acc": 0.5}, "Metric | Value")
    assert json.loads(path.read_text(encoding="utf-8")) == {"Acc": 0.5}
    assert (tmp_path / "reports" / "metrics.txt").read_text(encoding="utf-8").strip() == "Metric | Value"


def test_plot_history_writes_image(tmp_path):
    path = tmp_path / "loss.png"
    history = [{"l_part": 1.0, "lr": 0.1}, {"l_part": 0.5, "lr": 0.1}]
    assert plot_history(history, str(path)) == str(path)
    assert path.exists() and path.stat().st_size > 0
