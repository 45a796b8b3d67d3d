"""Small hand-built records shared by the test modules."""

from typing import Optional, Sequence

from src.dataset import DatasetConfig, FrameGT, PartGT, PersonGT, VideoAnnotation

CONFIG = DatasetConfig(action_names=("walk", "wave", "kick"), part_names=("head", "hand"),
                       state_names=("none", "up", "down"))


def part(part_id: int, box, state_id: int = 0, score: Optional[float] = None) -> PartGT:
    return PartGT(part_id=part_id, box=tuple(float(v) for v in box), state_id=state_id, score=score)


def person(box, parts: Sequence[PartGT] = (), score: Optional[float] = None, action_scores=None) -> PersonGT:
    return PersonGT(box=tuple(float(v) for v in box), parts=tuple(parts), score=score,
                    action_scores=action_scores)


def video(video_id: str, action_id: int, frames: Sequence[Sequence[PersonGT]], width: int = 100,
          height: int = 100, action_scores=None) -> VideoAnnotation:
    return VideoAnnotation(
        video_id=video_id,
        action_id=action_id,
        frames=tuple(FrameGT(frame_index=i, persons=tuple(persons), frame_action_id=action_id)
                     for i, persons in enumerate(frames)),
        width=width,
        height=height,
        action_scores=action_scores,
    )


def one_hot(index: int, size: int):
    return tuple(1.0 if i == index else 0.0 for i in range(size))


def gt_video(video_id: str = "v0", action_id: int = 1) -> VideoAnnotation:
    """One person with both parts annotated in each of two frames."""
    actor = person((10, 10, 50, 90), [part(0, (20, 10, 40, 30), 1), part(1, (10, 40, 30, 60), 2)])
    return video(video_id, action_id, [[actor], [actor]])


def as_prediction(gt: VideoAnnotation, action_id: Optional[int] = None) -> VideoAnnotation:
    """Ground truth turned into a perfect (or action-swapped) prediction record."""
    from dataclasses import replace

    action = gt.action_id if action_id is None else action_id
    frames = tuple(
        FrameGT(frame_index=f.frame_index, frame_action_id=action, persons=tuple(
            replace(p, score=0.9, parts=tuple(replace(k, score=0.8) for k in p.parts)) for p in f.persons))
        for f in gt.frames)
    return replace(gt, action_id=action, frames=frames, action_scores=one_hot(action, 3))
