import json

import numpy as np
import pytest

from src.dataset import (
    DatasetConfig,
    dump_dataset,
    horizontal_flip,
    load_config,
    load_dataset,
    sample_frames,
    save_dataset,
    split_minival,
    strip_predictions,
    validate_video,
)
from src.errors import ArgumentError, DatasetParseError, SchemaError
from tests.helpers import CONFIG, as_prediction, gt_video, part, person, video


def _write(path, document):
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


def _document(**video_overrides):
    record = {
        "video_id": "a",
        "action": "wave",
        "width": 100,
        "height": 100,
        "frames": [{"idx": 0, "persons": [{"box": [10, 10, 50, 90],
                                           "parts": [{"part": "head", "box": [20, 10, 40, 30], "state": "up"}]}]}],
    }
    record.update(video_overrides)
    return {"config": {"actions": list(CONFIG.action_names), "parts": list(CONFIG.part_names),
                       "states": list(CONFIG.state_names)},
            "videos": [record]}


def test_config_sizes_and_none_state():
    assert (CONFIG.C, CONFIG.K, CONFIG.S) == (3, 2, 3)
    assert CONFIG.none_state == 0
    assert DatasetConfig(("a", "b"), ("p",), ("x", "y")).none_state is None


def test_config_rejects_small_or_duplicate_vocabularies():
    with pytest.raises(ArgumentError):
        DatasetConfig(("only",), ("p",), ("x", "y"))
    with pytest.raises(ArgumentError):
        DatasetConfig(("a", "b"), ("p",), ("x",))
    with pytest.raises(ArgumentError):
        DatasetConfig(("a", "a"), ("p",), ("x", "y"))


def test_load_resolves_labels(tmp_path):
    videos = load_dataset(_write(tmp_path / "d.json", _document()))
    assert len(videos) == 1
    v = videos[0]
    assert v.action_id == 1
    (p,) = v.frames[0].persons
    assert p.parts[0].part_id == 0 and p.parts[0].state_id == 1
    assert v.frames[0].frame_action_id == 1


def test_load_clips_boxes_to_frame_and_person(tmp_path):
    doc = _document()
    doc["videos"][0]["frames"][0]["persons"][0]["box"] = [-5, 10, 120, 90]
    doc["videos"][0]["frames"][0]["persons"][0]["parts"][0]["box"] = [-10, 5, 40, 30]
    v = load_dataset(_write(tmp_path / "d.json", doc))[0]
    p = v.frames[0].persons[0]
    assert p.box == (0.0, 10.0, 100.0, 90.0)
    assert p.parts[0].box == (0.0, 10.0, 40.0, 30.0)


def test_part_outside_person_becomes_degenerate(tmp_path):
    doc = _document()
    doc["videos"][0]["frames"][0]["persons"][0]["parts"][0]["box"] = [60, 10, 80, 30]
    with pytest.raises(SchemaError):
        load_dataset(_write(tmp_path / "d.json", doc))


def test_malformed_json_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"videos": [\n  {"video_id": }\n]}', encoding="utf-8")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(str(path), CONFIG)
    assert info.value.line == 2


def test_unknown_label_names_the_label(tmp_path):
    with pytest.raises(SchemaError) as info:
        load_dataset(_write(tmp_path / "d.json", _document(action="dance")))
    assert info.value.label == "dance"


def test_extra_fields_are_rejected(tmp_path):
    with pytest.raises(SchemaError):
        load_dataset(_write(tmp_path / "d.json", _document(camera="left")))


def test_missing_file_is_an_argument_error(tmp_path):
    with pytest.raises(ArgumentError):
        load_dataset(str(tmp_path / "nope.json"))
    with pytest.raises(ArgumentError):
        load_config(str(tmp_path / "nope.json"))


def test_prediction_needs_scores(tmp_path):
    path = _write(tmp_path / "d.json", _document())
    with pytest.raises(SchemaError):
        load_dataset(path, predictions=True)


def test_save_then_load_keeps_records(tmp_path):
    gt = gt_video()
    path = str(tmp_path / "out" / "gt.json")
    save_dataset(path, [gt], CONFIG)
    assert load_dataset(path) == [gt]
    assert load_config(path) == CONFIG


def test_save_is_byte_stable(tmp_path):
    pred = as_prediction(gt_video())
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    save_dataset(str(first), [pred], CONFIG, predictions=True)
    save_dataset(str(second), [pred], CONFIG, predictions=True)
    assert first.read_bytes() == second.read_bytes()
    assert load_dataset(str(first), predictions=True)[0].predicted_action == 1


def test_dump_rounds_scores():
    pred = as_prediction(gt_video())
    text = dump_dataset([pred], CONFIG, predictions=True)
    assert '"score": 0.9' in text


def test_validate_rejects_unordered_frames():
    v = video("v", 0, [[], []])
    frames = (v.frames[1], v.frames[0])
    from dataclasses import replace

    with pytest.raises(SchemaError):
        validate_video(replace(v, frames=frames), CONFIG)


def test_validate_rejects_duplicate_parts():
    v = video("v", 0, [[person((0, 0, 50, 50), [part(0, (0, 0, 10, 10)), part(0, (5, 5, 20, 20))])]])
    with pytest.raises(SchemaError):
        validate_video(v, CONFIG)


def test_split_sizes_and_order():
    videos = [video(f"v{i:04d}", i % 3, [[]]) for i in range(3809)]
    train, val = split_minival(videos, 0.3, seed=7)
    assert len(val) == 1143
    assert len(train) == 3809 - 1143
    assert {v.video_id for v in train}.isdisjoint(v.video_id for v in val)
    assert [v.video_id for v in val] == sorted(v.video_id for v in val)
    again, _ = split_minival(videos, 0.3, seed=7)
    assert again == train


def test_stratified_split_per_class():
    videos = [video(f"v{i}", 0, [[]]) for i in range(10)] + [video(f"w{i}", 1, [[]]) for i in range(20)]
    _, val = split_minival(videos, 0.5, seed=0, stratified=True)
    assert sum(v.action_id == 0 for v in val) == 5
    assert sum(v.action_id == 1 for v in val) == 10


def test_split_fraction_bounds():
    with pytest.raises(ArgumentError):
        split_minival([gt_video()], 1.0, seed=0)


def test_sample_frames_sorted_and_deterministic():
    v = video("v", 0, [[] for _ in range(20)])
    chosen = sample_frames(v, 8, seed=3)
    assert chosen == sorted(chosen)
    assert len(set(chosen)) == 8
    assert chosen == sample_frames(v, 8, seed=3)


def test_sample_frames_repeats_short_videos():
    v = video("v", 0, [[], []])
    chosen = sample_frames(v, 5, seed=0)
    assert len(chosen) == 5
    assert set(chosen) <= {0, 1}
    with pytest.raises(ArgumentError):
        sample_frames(v, 0, seed=0)


def test_horizontal_flip_mirrors_boxes_and_pixels():
    v = gt_video()
    pixels = np.arange(2 * 100 * 100 * 3, dtype=np.uint8).reshape(2, 100, 100, 3)
    flipped, flipped_pixels = horizontal_flip(v, pixels)
    assert flipped.frames[0].persons[0].box == (50.0, 10.0, 90.0, 90.0)
    assert flipped.frames[0].persons[0].parts[0].box == (60.0, 10.0, 80.0, 30.0)
    assert np.array_equal(flipped_pixels[:, :, 0], pixels[:, :, -1])
    twice, _ = horizontal_flip(flipped)
    assert twice == v


def test_strip_predictions_drops_scores():
    stripped = strip_predictions(as_prediction(gt_video()))
    assert stripped == gt_video()
