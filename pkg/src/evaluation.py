"""
Metrics and the ground-truth substitution diagnostic.

- detection_map: all-point interpolated AP of person boxes over every frame.
- video_accuracy: mean per-class accuracy of argmax action predictions.
- part_state_correctness (PSC): fraction of ground-truth parts whose predicted
  box matches (IoU) inside a matched person and whose state agrees.
- acc_p: mean over videos of [action correct] * [PSC >= theta].
- substitute_ground_truth / bottleneck_grid: replace one or more pipeline
  outputs by ground truth and re-score Acc^p.

Person matching is greedy: predictions in descending score order (larger
area, then lower index on ties) each take the unmatched ground-truth person
with the highest IoU >= threshold (lower index on ties).
"""

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.dataset import FrameGT, PartGT, PersonGT, VideoAnnotation
from src.errors import AlignmentError, ArgumentError
from src.tools.boxes import iou, score_order

__all__ = [
    "MatchConfig",
    "SubstitutionFlags",
    "DiagnosisGrid",
    "GRID_ROWS",
    "align_videos",
    "match_persons",
    "iou",
    "detection_map",
    "video_accuracy",
    "per_class_accuracy",
    "part_state_correctness",
    "acc_p",
    "substitute_ground_truth",
    "bottleneck_grid",
    "restricted_flags",
]


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5
    psc_threshold: float = 0.5
    matching: str = "greedy"

    MATCHING_MODES = ("greedy",)

    def __post_init__(self):
        for name in ("iou_threshold", "psc_threshold"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ArgumentError(f"{name} must lie in (0, 1], got {value}")
        if self.matching not in self.MATCHING_MODES:
            raise ArgumentError(f"matching must be one of {self.MATCHING_MODES}, got '{self.matching}'")


FLAG_NAMES = ("actor_detection", "part_det", "state_parsing", "action_parsing")
FLAG_ALIASES = {"actor_det": "actor_detection", "actor": "actor_detection", "action": "action_parsing",
                "state": "state_parsing"}


@dataclass(frozen=True)
class SubstitutionFlags:
    actor_detection: bool = False
    part_det: bool = False
    state_parsing: bool = False
    action_parsing: bool = False

    @property
    def any(self) -> bool:
        return any(getattr(self, name) for name in FLAG_NAMES)

    def label(self) -> str:
        enabled = [name for name in FLAG_NAMES if getattr(self, name)]
        return "+".join(enabled) if enabled else "baseline"

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "SubstitutionFlags":
        values = {}
        for raw in names:
            name = FLAG_ALIASES.get(raw.strip(), raw.strip())
            if not name:
                continue
            if name not in FLAG_NAMES:
                raise ArgumentError(f"Unknown substitution flag '{raw}' (expected {FLAG_NAMES})")
            values[name] = True
        return cls(**values)


def _flags(*names: str) -> SubstitutionFlags:
    return SubstitutionFlags(**{name: True for name in names})


# Row order of the bottleneck table.
GRID_ROWS: Tuple[SubstitutionFlags, ...] = (
    _flags(),
    _flags("actor_detection"),
    _flags("part_det"),
    _flags("part_det", "state_parsing"),
    _flags("action_parsing"),
    _flags("state_parsing"),
    _flags("actor_detection", "part_det"),
    _flags("actor_detection", "part_det", "state_parsing"),
    _flags("actor_detection", "action_parsing"),
    _flags("part_det", "state_parsing", "action_parsing"),
    _flags("actor_detection", "part_det", "state_parsing", "action_parsing"),
)


@dataclass
class DiagnosisGrid:
    rows: List[Tuple[SubstitutionFlags, float]]

    def value(self, flags: SubstitutionFlags) -> float:
        for row_flags, value in self.rows:
            if row_flags == flags:
                return value
        raise KeyError(flags.label())


# ----------------------------------------------------------------------------
# Alignment and matching
# ----------------------------------------------------------------------------

def align_videos(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation]
                 ) -> List[Tuple[VideoAnnotation, VideoAnnotation]]:
    """Pairs records by video id in ground-truth order; any id mismatch is an AlignmentError."""
    by_id = {p.video_id: p for p in predictions}
    gt_ids = {g.video_id for g in ground_truth}
    missing = [vid for vid in gt_ids if vid not in by_id]
    unexpected = [vid for vid in by_id if vid not in gt_ids]
    if missing or unexpected:
        raise AlignmentError(missing, unexpected)
    return [(by_id[g.video_id], g) for g in ground_truth]


def _person_score(person: PersonGT) -> float:
    return 1.0 if person.score is None else float(person.score)


def match_persons(pred_persons: Sequence[PersonGT], gt_persons: Sequence[PersonGT],
                  iou_threshold: float) -> Dict[int, int]:
    """Greedy one-to-one matching; returns {pred index: gt index}."""
    order = score_order([_person_score(p) for p in pred_persons], [p.box for p in pred_persons])
    taken = set()
    matches = {}
    for p_idx in order:
        best, best_iou = None, iou_threshold
        for g_idx, gt in enumerate(gt_persons):
            if g_idx in taken:
                continue
            overlap = iou(pred_persons[p_idx].box, gt.box)
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = g_idx, overlap
        if best is not None:
            taken.add(best)
            matches[p_idx] = best
    return matches


def _frame_pairs(pred: VideoAnnotation, gt: VideoAnnotation) -> List[Tuple[Tuple[PersonGT, ...], FrameGT]]:
    pred_frames = pred.frame_by_index()
    pairs = []
    for frame in gt.frames:
        pred_frame = pred_frames.get(frame.frame_index)
        pairs.append((pred_frame.persons if pred_frame is not None else (), frame))
    return pairs


# ----------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------

def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP from a score-ordered true-positive sequence."""
    if num_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    hits = np.asarray(tp, dtype=np.float64)
    cum_tp = np.cumsum(hits)
    cum_fp = np.cumsum(1.0 - hits)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    recall = np.concatenate([[0.0], recall, [1.0]])
    precision = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def detection_map(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation],
                  cfg: MatchConfig = MatchConfig()) -> float:
    """
    Person-category AP at cfg.iou_threshold over all ground-truth frames.
    Predictions are processed in descending score; each takes the unmatched
    ground-truth box of highest IoU in its frame.
    """
    candidates = []  # (score, (video, frame), person index, box)
    gt_boxes: Dict[Tuple[int, int], List] = {}
    num_gt = 0
    for v_idx, (pred, gt) in enumerate(align_videos(predictions, ground_truth)):
        for persons, frame in _frame_pairs(pred, gt):
            key = (v_idx, frame.frame_index)
            gt_boxes[key] = [p.box for p in frame.persons]
            num_gt += len(frame.persons)
            for p_idx, person in enumerate(persons):
                candidates.append((_person_score(person), key, p_idx, person.box))

    candidates.sort(key=lambda c: (-c[0], c[1][0], c[1][1], c[2]))
    taken = {key: set() for key in gt_boxes}
    tp = []
    for _, key, _, box in candidates:
        best, best_iou = None, cfg.iou_threshold
        for g_idx, gt_box in enumerate(gt_boxes[key]):
            if g_idx in taken[key]:
                continue
            overlap = iou(box, gt_box)
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = g_idx, overlap
        if best is not None:
            taken[key].add(best)
        tp.append(best is not None)
    return average_precision(tp, num_gt)


def per_class_accuracy(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation]
                       ) -> Dict[int, float]:
    """Accuracy of argmax predictions per action present in the ground truth."""
    correct: Dict[int, int] = {}
    total: Dict[int, int] = {}
    for pred, gt in align_videos(predictions, ground_truth):
        total[gt.action_id] = total.get(gt.action_id, 0) + 1
        correct[gt.action_id] = correct.get(gt.action_id, 0) + int(pred.predicted_action == gt.action_id)
    return {c: correct[c] / total[c] for c in sorted(total)}


def video_accuracy(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation]) -> float:
    per_class = per_class_accuracy(predictions, ground_truth)
    if not per_class:
        return 0.0
    return float(np.mean(list(per_class.values())))


def part_state_correctness(pred_video: VideoAnnotation, gt_video: VideoAnnotation,
                           cfg: MatchConfig = MatchConfig()) -> float:
    total = 0
    correct = 0
    for pred_persons, frame in _frame_pairs(pred_video, gt_video):
        total += sum(len(person.parts) for person in frame.persons)
        for p_idx, g_idx in match_persons(pred_persons, frame.persons, cfg.iou_threshold).items():
            pred_parts = {part.part_id: part for part in pred_persons[p_idx].parts}
            for gt_part in frame.persons[g_idx].parts:
                candidate = pred_parts.get(gt_part.part_id)
                if candidate is None:
                    continue
                if iou(candidate.box, gt_part.box) >= cfg.iou_threshold and candidate.state_id == gt_part.state_id:
                    correct += 1
    if total == 0:
        return 1.0
    return correct / total


def acc_p(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation],
          cfg: MatchConfig = MatchConfig()) -> float:
    pairs = align_videos(predictions, ground_truth)
    if not pairs:
        return 0.0
    hits = [
        int(pred.predicted_action == gt.action_id
            and part_state_correctness(pred, gt, cfg) >= cfg.psc_threshold)
        for pred, gt in pairs
    ]
    return float(np.mean(hits))


# ----------------------------------------------------------------------------
# Ground-truth substitution
# ----------------------------------------------------------------------------

def _substitute_parts(pred_parts: Sequence[PartGT], gt_parts: Sequence[PartGT], flags: SubstitutionFlags,
                      none_state: int) -> Tuple[PartGT, ...]:
    gt_by_id = {part.part_id: part for part in gt_parts}
    pred_ids = set()
    parts = []
    for part in pred_parts:
        pred_ids.add(part.part_id)
        gt_part = gt_by_id.get(part.part_id)
        if gt_part is not None:
            if flags.part_det:
                part = replace(part, box=gt_part.box, score=1.0)
            if flags.state_parsing:
                part = replace(part, state_id=gt_part.state_id)
        parts.append(part)
    if flags.part_det:
        for gt_part in gt_parts:
            if gt_part.part_id in pred_ids:
                continue
            state = gt_part.state_id if flags.state_parsing else none_state
            parts.append(PartGT(part_id=gt_part.part_id, box=gt_part.box, state_id=state, score=1.0))
    return tuple(parts)


def _substitute_frame(pred_persons: Sequence[PersonGT], gt_frame: FrameGT, flags: SubstitutionFlags,
                      cfg: MatchConfig, none_state: int) -> Tuple[PersonGT, ...]:
    matches = match_persons(pred_persons, gt_frame.persons, cfg.iou_threshold)
    persons = []
    for p_idx, person in enumerate(pred_persons):
        g_idx = matches.get(p_idx)
        if g_idx is None:
            if not flags.actor_detection:
                persons.append(person)
            continue
        gt_person = gt_frame.persons[g_idx]
        if flags.part_det or flags.state_parsing:
            person = replace(person, parts=_substitute_parts(person.parts, gt_person.parts, flags, none_state))
        if flags.actor_detection:
            person = replace(person, box=gt_person.box, score=1.0)
        persons.append(person)
    if flags.actor_detection:
        matched_gt = set(matches.values())
        for g_idx, gt_person in enumerate(gt_frame.persons):
            if g_idx in matched_gt:
                continue
            parts = _substitute_parts((), gt_person.parts, flags, none_state) if flags.part_det else ()
            persons.append(PersonGT(box=gt_person.box, parts=parts, score=1.0))
    return tuple(persons)


def _substitute_video(pred: VideoAnnotation, gt: VideoAnnotation, flags: SubstitutionFlags,
                      cfg: MatchConfig, num_actions: int, none_state: int) -> VideoAnnotation:
    action_id = pred.predicted_action
    action_scores = pred.action_scores
    if flags.action_parsing:
        action_id = gt.action_id
        one_hot = [0.0] * num_actions
        one_hot[gt.action_id] = 1.0
        action_scores = tuple(one_hot)

    pred_frames = pred.frame_by_index()
    gt_frames = gt.frame_by_index()
    indices = sorted(set(pred_frames) | (set(gt_frames) if flags.actor_detection else set()))
    frames = []
    for index in indices:
        pred_frame = pred_frames.get(index)
        persons = pred_frame.persons if pred_frame is not None else ()
        if index in gt_frames and (flags.actor_detection or flags.part_det or flags.state_parsing):
            persons = _substitute_frame(persons, gt_frames[index], flags, cfg, none_state)
        frames.append(FrameGT(frame_index=index, persons=persons, frame_action_id=action_id))
    return replace(pred, action_id=action_id, action_scores=action_scores, frames=tuple(frames))


def substitute_ground_truth(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation],
                            flags: SubstitutionFlags, cfg: MatchConfig = MatchConfig(),
                            num_actions: Optional[int] = None, none_state: Optional[int] = None
                            ) -> List[VideoAnnotation]:
    """
    Returns predictions with the flagged stages replaced by ground truth,
    keyed to the prediction order. Parts travel with the person they were
    matched through; unmatched ground truth is added when its flag is set.
    Added parts take none_state (or 0) unless state_parsing is also set.
    """
    if not flags.any:
        return list(predictions)
    pairs = align_videos(predictions, ground_truth)
    if num_actions is None:
        lengths = [len(p.action_scores) for p, _ in pairs if p.action_scores is not None]
        num_actions = lengths[0] if lengths else max([g.action_id for _, g in pairs], default=0) + 1
    substituted = {
        pred.video_id: _substitute_video(pred, gt, flags, cfg, num_actions,
                                         none_state if none_state is not None else 0)
        for pred, gt in pairs
    }
    return [substituted[p.video_id] for p in predictions]


def bottleneck_grid(predictions: Sequence[VideoAnnotation], ground_truth: Sequence[VideoAnnotation],
                    cfg: MatchConfig = MatchConfig(), num_actions: Optional[int] = None,
                    none_state: Optional[int] = None,
                    rows: Sequence[SubstitutionFlags] = GRID_ROWS) -> DiagnosisGrid:
    grid = []
    for flags in rows:
        substituted = substitute_ground_truth(predictions, ground_truth, flags, cfg, num_actions, none_state)
        grid.append((flags, acc_p(substituted, ground_truth, cfg)))
    return DiagnosisGrid(rows=grid)


def restricted_flags(spec: Optional[str]) -> Optional[SubstitutionFlags]:
    """Parses a comma-separated --flags value ('actor_det,part_det,...'); None for an empty value."""
    if not spec:
        return None
    return SubstitutionFlags.from_names(spec.split(","))
