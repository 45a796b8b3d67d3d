"""
Dataset records, JSON ingestion/serialization, minival splitting and frame sampling.

Ground truth and predictions share the same record types: a prediction is a
VideoAnnotation whose persons/parts carry confidence scores and whose video
carries an action score vector.
"""

import json
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from src.errors import ArgumentError, DatasetParseError, SchemaError
from src.schemas import (
    ConfigRecord,
    DatasetDocument,
    FrameRecord,
    PartRecord,
    PersonRecord,
    VideoRecord,
)

Box = Tuple[float, float, float, float]

SCORE_DECIMALS = 8
NORMALIZED_TOLERANCE = 1e-6


@dataclass(frozen=True)
class DatasetConfig:
    """Label vocabularies. C, K and S are the lengths of the name lists."""

    action_names: Tuple[str, ...]
    part_names: Tuple[str, ...]
    state_names: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "action_names", tuple(self.action_names))
        object.__setattr__(self, "part_names", tuple(self.part_names))
        object.__setattr__(self, "state_names", tuple(self.state_names))
        if self.C < 2:
            raise ArgumentError(f"Need at least 2 action categories, got {self.C}")
        if self.K < 1:
            raise ArgumentError("Need at least 1 body part")
        if self.S < 2:
            raise ArgumentError(f"Need at least 2 part states, got {self.S}")
        for names, kind in ((self.action_names, "action"), (self.part_names, "part"), (self.state_names, "state")):
            if len(set(names)) != len(names):
                raise ArgumentError(f"Duplicate {kind} names in {list(names)}")

    @property
    def C(self) -> int:
        return len(self.action_names)

    @property
    def K(self) -> int:
        return len(self.part_names)

    @property
    def S(self) -> int:
        return len(self.state_names)

    @property
    def none_state(self) -> Optional[int]:
        """Index of the distinguished 'none' state, if the vocabulary has one."""
        return self.state_names.index("none") if "none" in self.state_names else None

    def to_record(self) -> ConfigRecord:
        return ConfigRecord(actions=list(self.action_names), parts=list(self.part_names),
                            states=list(self.state_names))

    @classmethod
    def from_record(cls, record: ConfigRecord) -> "DatasetConfig":
        return cls(tuple(record.actions), tuple(record.parts), tuple(record.states))


@dataclass(frozen=True)
class PartGT:
    part_id: int
    box: Box
    state_id: int
    score: Optional[float] = None


@dataclass(frozen=True)
class PersonGT:
    box: Box
    parts: Tuple[PartGT, ...] = ()
    score: Optional[float] = None
    action_scores: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class FrameGT:
    frame_index: int
    persons: Tuple[PersonGT, ...]
    frame_action_id: int


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    action_id: int
    frames: Tuple[FrameGT, ...]
    width: int
    height: int
    action_scores: Optional[Tuple[float, ...]] = None

    def frame_by_index(self) -> Dict[int, FrameGT]:
        return {f.frame_index: f for f in self.frames}

    @property
    def predicted_action(self) -> int:
        """Argmax of the action scores (lowest index on ties); the label when no scores exist."""
        if self.action_scores is None:
            return self.action_id
        return int(np.argmax(np.asarray(self.action_scores)))


# Predictions reuse the annotation record; the alias documents intent at call sites.
PredictionRecord = VideoAnnotation


def clip_box(box: Sequence[float], bounds: Box) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    bx1, by1, bx2, by2 = bounds
    return (min(max(x1, bx1), bx2), min(max(y1, by1), by2), min(max(x2, bx1), bx2), min(max(y2, by1), by2))


def _check_box(box: Box, locus: str):
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise SchemaError(f"Degenerate box {list(box)}", locus=locus)


def validate_video(video: VideoAnnotation, config: DatasetConfig, prediction: bool = False):
    """Checks every record invariant of one video; raises SchemaError with the failing locus."""
    vloc = f"video '{video.video_id}'"
    if not 0 <= video.action_id < config.C:
        raise SchemaError(f"action index {video.action_id} out of range", locus=vloc)
    if not video.frames:
        raise SchemaError("video has no frames", locus=vloc)
    if prediction:
        if video.action_scores is None:
            raise SchemaError("prediction is missing action_scores", locus=vloc)
        if abs(sum(video.action_scores) - 1.0) > NORMALIZED_TOLERANCE:
            raise SchemaError("prediction action_scores do not sum to 1", locus=vloc)
    if video.action_scores is not None and len(video.action_scores) != config.C:
        raise SchemaError(f"action_scores has {len(video.action_scores)} entries, expected {config.C}", locus=vloc)

    previous = -1
    for frame in video.frames:
        floc = f"{vloc} frame {frame.frame_index}"
        if frame.frame_index <= previous:
            raise SchemaError("frame indices must be strictly increasing", locus=floc)
        previous = frame.frame_index
        if frame.frame_action_id != video.action_id:
            raise SchemaError("frame action differs from video action", locus=floc)
        for p_idx, person in enumerate(frame.persons):
            ploc = f"{floc} person {p_idx}"
            _check_box(person.box, ploc)
            x1, y1, x2, y2 = person.box
            if x1 < 0 or y1 < 0 or x2 > video.width or y2 > video.height:
                raise SchemaError("person box outside frame bounds", locus=ploc)
            if prediction and person.score is None:
                raise SchemaError("prediction person is missing a score", locus=ploc)
            seen = set()
            for part in person.parts:
                kloc = f"{ploc} part {part.part_id}"
                if not 0 <= part.part_id < config.K:
                    raise SchemaError("part index out of range", locus=kloc)
                if not 0 <= part.state_id < config.S:
                    raise SchemaError("state index out of range", locus=kloc)
                if part.part_id in seen:
                    raise SchemaError("more than one entry for the same part", locus=kloc)
                seen.add(part.part_id)
                _check_box(part.box, kloc)
                px1, py1, px2, py2 = part.box
                if px1 < x1 or py1 < y1 or px2 > x2 or py2 > y2:
                    raise SchemaError("part box outside its person box", locus=kloc)
                if prediction and part.score is None:
                    raise SchemaError("prediction part is missing a score", locus=kloc)


# ----------------------------------------------------------------------------
# Wire conversion
# ----------------------------------------------------------------------------

def _resolve(names: Tuple[str, ...], label: str, kind: str, locus: str) -> int:
    try:
        return names.index(label)
    except ValueError:
        raise SchemaError(f"Unknown {kind} label '{label}'", label=label, locus=locus) from None


def _video_from_record(rec: VideoRecord, config: DatasetConfig, v_idx: int) -> VideoAnnotation:
    vloc = f"videos[{v_idx}]"
    action_id = _resolve(config.action_names, rec.action, "action", vloc)
    frame_bounds = (0.0, 0.0, float(rec.width), float(rec.height))
    frames = []
    for f_idx, frec in enumerate(rec.frames):
        persons = []
        for p_idx, prec in enumerate(frec.persons):
            ploc = f"{vloc}.frames[{f_idx}].persons[{p_idx}]"
            person_box = clip_box(prec.box, frame_bounds)
            parts = []
            for k_idx, krec in enumerate(prec.parts):
                kloc = f"{ploc}.parts[{k_idx}]"
                parts.append(PartGT(
                    part_id=_resolve(config.part_names, krec.part, "part", kloc),
                    box=clip_box(krec.box, person_box),
                    state_id=_resolve(config.state_names, krec.state, "state", kloc),
                    score=krec.score,
                ))
            persons.append(PersonGT(
                box=person_box,
                parts=tuple(parts),
                score=prec.score,
                action_scores=tuple(prec.action_scores) if prec.action_scores is not None else None,
            ))
        frames.append(FrameGT(frame_index=frec.idx, persons=tuple(persons), frame_action_id=action_id))
    return VideoAnnotation(
        video_id=rec.video_id,
        action_id=action_id,
        frames=tuple(frames),
        width=rec.width,
        height=rec.height,
        action_scores=tuple(rec.action_scores) if rec.action_scores is not None else None,
    )


def _round(value: float) -> float:
    return round(float(value), SCORE_DECIMALS)


def _round_box(box: Box) -> List[float]:
    return [_round(v) for v in box]


def _video_to_record(video: VideoAnnotation, config: DatasetConfig) -> VideoRecord:
    frames = []
    for frame in video.frames:
        persons = []
        for person in frame.persons:
            parts = [PartRecord(
                part=config.part_names[part.part_id],
                box=_round_box(part.box),
                state=config.state_names[part.state_id],
                score=_round(part.score) if part.score is not None else None,
            ) for part in person.parts]
            persons.append(PersonRecord(
                box=_round_box(person.box),
                score=_round(person.score) if person.score is not None else None,
                action_scores=[_round(s) for s in person.action_scores] if person.action_scores is not None else None,
                parts=parts,
            ))
        frames.append(FrameRecord(idx=frame.frame_index, persons=persons))
    return VideoRecord(
        video_id=video.video_id,
        action=config.action_names[video.action_id],
        width=video.width,
        height=video.height,
        action_scores=[_round(s) for s in video.action_scores] if video.action_scores is not None else None,
        frames=frames,
    )


def load_dataset(path: str, config: Optional[DatasetConfig] = None, predictions: bool = False) -> List[VideoAnnotation]:
    """
    Reads a dataset (or prediction) JSON file.

    Labels resolve against `config`; when it is None the file's own "config"
    block is used. Raises DatasetParseError for malformed JSON and SchemaError
    for schema/invariant violations or unknown label names.
    """
    if not os.path.exists(path):
        raise ArgumentError(f"Dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetParseError(f"Malformed JSON in {path}: {e.msg}", line=e.lineno, column=e.colno) from e

    try:
        document = DatasetDocument.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        locus = ".".join(str(p) for p in first["loc"])
        raise SchemaError(f"Invalid record in {path}: {first['msg']}", locus=locus) from e

    if config is None:
        if document.config is None:
            raise SchemaError(f"{path} carries no config block and none was supplied")
        config = DatasetConfig.from_record(document.config)

    videos = [_video_from_record(rec, config, i) for i, rec in enumerate(document.videos)]
    for video in videos:
        validate_video(video, config, prediction=predictions)
    return videos


def load_config(path: str) -> DatasetConfig:
    """Reads only the label vocabulary block of a dataset file."""
    if not os.path.exists(path):
        raise ArgumentError(f"Dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetParseError(f"Malformed JSON in {path}: {e.msg}", line=e.lineno, column=e.colno) from e
    if "config" not in raw:
        raise SchemaError(f"{path} carries no config block")
    return DatasetConfig.from_record(ConfigRecord.model_validate(raw["config"]))


def dump_dataset(videos: Sequence[VideoAnnotation], config: DatasetConfig, predictions: bool = False) -> str:
    for video in videos:
        validate_video(video, config, prediction=predictions)
    document = DatasetDocument(config=config.to_record(),
                               videos=[_video_to_record(v, config) for v in videos])
    return json.dumps(document.model_dump(exclude_none=True), indent=2)


def save_dataset(path: str, videos: Sequence[VideoAnnotation], config: DatasetConfig, predictions: bool = False):
    """Validates, then writes atomically (tmp file + rename). Output is byte-stable for equal inputs."""
    text = dump_dataset(videos, config, predictions=predictions)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(text)
        f.write("\n")
    os.replace(tmp_path, path)


# ----------------------------------------------------------------------------
# Splits and sampling
# ----------------------------------------------------------------------------

def split_minival(dataset: Sequence[VideoAnnotation], fraction: float, seed: int,
                  stratified: bool = False) -> Tuple[List[VideoAnnotation], List[VideoAnnotation]]:
    """
    Random hold-out of round(fraction * n) videos. Both halves keep the input order.
    With stratified=True the rule is applied per action class.
    """
    if not 0.0 < fraction < 1.0:
        raise ArgumentError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)

    if stratified:
        groups: Dict[int, List[int]] = {}
        for i, video in enumerate(dataset):
            groups.setdefault(video.action_id, []).append(i)
        val_idx = set()
        for action_id in sorted(groups):
            members = groups[action_id]
            n_val = int(round(fraction * len(members)))
            picked = rng.permutation(len(members))[:n_val]
            val_idx.update(members[j] for j in picked)
    else:
        n_val = int(round(fraction * len(dataset)))
        val_idx = set(int(i) for i in rng.permutation(len(dataset))[:n_val])

    train = [v for i, v in enumerate(dataset) if i not in val_idx]
    val = [v for i, v in enumerate(dataset) if i in val_idx]
    return train, val


def sample_frames(video: VideoAnnotation, T: int, seed: int) -> List[int]:
    """T sorted frame indices; sampling falls back to with-replacement when the video is shorter than T."""
    if T < 1:
        raise ArgumentError(f"T must be >= 1, got {T}")
    if not video.frames:
        raise ArgumentError(f"Video '{video.video_id}' has no frames to sample")
    indices = np.array([f.frame_index for f in video.frames])
    rng = np.random.default_rng(seed)
    replace_draw = len(indices) < T
    chosen = rng.choice(indices, size=T, replace=replace_draw)
    return sorted(int(i) for i in chosen)


def horizontal_flip(video: VideoAnnotation, frames: Optional[np.ndarray] = None
                    ) -> Tuple[VideoAnnotation, Optional[np.ndarray]]:
    """Mirrors every box (and the pixel array, shaped N x H x W x 3) around the vertical axis."""
    W = float(video.width)

    def flip(box: Box) -> Box:
        x1, y1, x2, y2 = box
        return (W - x2, y1, W - x1, y2)

    new_frames = tuple(
        replace(frame, persons=tuple(
            replace(person, box=flip(person.box),
                    parts=tuple(replace(part, box=flip(part.box)) for part in person.parts))
            for person in frame.persons))
        for frame in video.frames
    )
    flipped = replace(video, frames=new_frames)
    pixels = frames[:, :, ::-1, :].copy() if frames is not None else None
    return flipped, pixels


def strip_predictions(video: VideoAnnotation) -> VideoAnnotation:
    """Drops every score field, leaving a plain annotation."""
    frames = tuple(
        replace(frame, persons=tuple(
            replace(person, score=None, action_scores=None,
                    parts=tuple(replace(part, score=None) for part in person.parts))
            for person in frame.persons))
        for frame in video.frames
    )
    return replace(video, frames=frames, action_scores=None)
