"""
Deterministic synthetic video generator.

Each video shows 1-2 actors built from a gray torso plus K colored part
rectangles. A part's state picks its motion pattern: "none" keeps the part
still in its rest pose, every active state swings the part along its own axis
and stretches it along that axis (with a light stripe), so the state can be
read from a single frame. The video action is a function of the actors' part
states (see label_action), which makes ground truth exact by construction.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.dataset import DatasetConfig, FrameGT, PartGT, PersonGT, VideoAnnotation
from src.errors import ArgumentError

MAX_ACTIONS = 8
MAX_PARTS = 6
MAX_STATES = 4

PART_NAMES = ("head", "left_arm", "right_arm", "left_leg", "right_leg", "tail")
STATE_NAMES = ("none", "swing_vertical", "swing_horizontal", "swing_diagonal")

# Rest offsets of each part center relative to the torso center, in actor units.
PART_OFFSETS = ((0.0, -13.0), (-10.0, -2.0), (10.0, -2.0), (-4.0, 15.0), (4.0, 15.0), (0.0, 26.0))
PART_COLORS = ((230, 60, 60), (60, 200, 60), (60, 90, 230), (230, 200, 40), (200, 60, 220), (40, 210, 210))
# Motion axis per active state (state 1..3).
STATE_AXES = ((0.0, 1.0), (1.0, 0.0), (math.sqrt(0.5), math.sqrt(0.5)))

TORSO_SIZE = (10.0, 16.0)
PART_SIZE = 6.0
PART_STRETCH = 4.0
SWING_AMPLITUDE = 3.0
SWING_PERIOD = 6.0
TORSO_COLOR = (150, 150, 150)
BACKGROUND = 30
NOISE = 8


@dataclass(frozen=True)
class SyntheticSpec:
    num_actions: int = 4
    num_parts: int = 4
    num_states: int = 3
    frame_width: int = 96
    frame_height: int = 96
    min_frames: int = 8
    max_frames: int = 16
    videos_per_class: int = 10
    max_actors: int = 2

    def validate(self):
        if not 2 <= self.num_actions <= MAX_ACTIONS:
            raise ArgumentError(f"num_actions must be in [2, {MAX_ACTIONS}], got {self.num_actions}")
        if not 1 <= self.num_parts <= MAX_PARTS:
            raise ArgumentError(f"num_parts must be in [1, {MAX_PARTS}], got {self.num_parts}")
        if not 2 <= self.num_states <= MAX_STATES:
            raise ArgumentError(f"num_states must be in [2, {MAX_STATES}], got {self.num_states}")
        if self.num_actions > self.num_parts * (self.num_states - 1):
            raise ArgumentError(
                f"{self.num_actions} actions cannot be encoded by {self.num_parts} parts "
                f"with {self.num_states - 1} active states")
        if self.frame_width < 64 or self.frame_height < 64:
            raise ArgumentError("Synthetic frames must be at least 64x64")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ArgumentError("Need 1 <= min_frames <= max_frames")
        if self.videos_per_class < 1 or not 1 <= self.max_actors <= 2:
            raise ArgumentError("videos_per_class must be >= 1 and max_actors in {1, 2}")

    def default_config(self) -> DatasetConfig:
        return DatasetConfig(
            action_names=tuple(f"action_{c}" for c in range(self.num_actions)),
            part_names=PART_NAMES[:self.num_parts],
            state_names=STATE_NAMES[:self.num_states],
        )


@dataclass
class SyntheticDataset:
    config: DatasetConfig
    videos: List[VideoAnnotation]
    frames: Dict[str, np.ndarray]  # video_id -> (N, H, W, 3) uint8


@dataclass(frozen=True)
class _Actor:
    cx: float
    cy: float
    vx: float
    vy: float
    scale: float
    states: Tuple[int, ...]
    phases: Tuple[float, ...]


def label_action(states: Sequence[int], num_actions: int, num_states: int) -> Optional[int]:
    """
    Action implied by one actor's part states: the lowest-index part that is
    not idle decides it. Returns None when every part is idle.
    """
    for part_id, state in enumerate(states):
        if state != 0:
            return (part_id * (num_states - 1) + state - 1) % num_actions
    return None


def action_from_annotation(video: VideoAnnotation, config: DatasetConfig) -> Optional[int]:
    """Majority of label_action over every annotated person in every frame."""
    votes: Dict[int, int] = {}
    for frame in video.frames:
        for person in frame.persons:
            states = [0] * config.K
            for part in person.parts:
                states[part.part_id] = part.state_id
            action = label_action(states, config.C, config.S)
            if action is not None:
                votes[action] = votes.get(action, 0) + 1
    if not votes:
        return None
    return min(votes, key=lambda a: (-votes[a], a))


def _states_for_action(action: int, spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[int, ...]:
    active = spec.num_states - 1
    codes = [code for code in range(spec.num_parts * active) if code % spec.num_actions == action]
    code = int(codes[rng.integers(len(codes))])
    lead_part, lead_state = code // active, code % active + 1
    states = []
    for part_id in range(spec.num_parts):
        if part_id < lead_part:
            states.append(0)
        elif part_id == lead_part:
            states.append(lead_state)
        else:
            states.append(int(rng.integers(spec.num_states)))
    return tuple(states)


def _part_geometry(actor: _Actor, part_id: int, t: int) -> Tuple[float, float, float, float, int]:
    """(cx, cy, w, h, state) of one part at frame t, in frame pixels."""
    state = actor.states[part_id]
    ox, oy = PART_OFFSETS[part_id]
    w = h = PART_SIZE
    if state > 0:
        ax, ay = STATE_AXES[state - 1]
        swing = SWING_AMPLITUDE * math.sin(actor.phases[part_id] + 2.0 * math.pi * t / SWING_PERIOD)
        ox += ax * swing
        oy += ay * swing
        w += PART_STRETCH * ax
        h += PART_STRETCH * ay
    s = actor.scale
    cx, cy = _actor_center(actor, t)
    return cx + ox * s, cy + oy * s, w * s, h * s, state


def _actor_center(actor: _Actor, t: int) -> Tuple[float, float]:
    return actor.cx + actor.vx * t, actor.cy + actor.vy * t


def _to_int_box(cx: float, cy: float, w: float, h: float) -> Tuple[float, float, float, float]:
    x1 = float(math.floor(cx - w / 2.0))
    y1 = float(math.floor(cy - h / 2.0))
    x2 = float(max(x1 + 1, math.ceil(cx + w / 2.0)))
    y2 = float(max(y1 + 1, math.ceil(cy + h / 2.0)))
    return x1, y1, x2, y2


def _actor_extent(scale: float, num_parts: int) -> Tuple[float, float]:
    """Half-width and half-height that bound the actor in any pose."""
    reach = SWING_AMPLITUDE + (PART_SIZE + PART_STRETCH) / 2.0
    offsets = PART_OFFSETS[:num_parts]
    half_w = max([TORSO_SIZE[0] / 2.0] + [abs(ox) + reach for ox, _ in offsets])
    half_h = max([TORSO_SIZE[1] / 2.0] + [abs(oy) + reach for _, oy in offsets])
    return half_w * scale + 1.0, half_h * scale + 1.0


def _place_actors(spec: SyntheticSpec, action: int, n_frames: int, rng: np.random.Generator) -> List[_Actor]:
    n_actors = int(rng.integers(1, spec.max_actors + 1))
    slot_w = spec.frame_width / n_actors
    actors = []
    for slot in range(n_actors):
        scale = float(rng.uniform(0.9, 1.1))
        half_w, half_h = _actor_extent(scale, spec.num_parts)
        vx, vy = (float(v) for v in rng.uniform(-0.4, 0.4, size=2))
        # Keep the whole trajectory inside the slot / frame.
        travel_x, travel_y = abs(vx) * (n_frames - 1), abs(vy) * (n_frames - 1)
        lo_x = slot * slot_w + half_w + travel_x
        hi_x = (slot + 1) * slot_w - half_w - travel_x
        lo_y = half_h + travel_y
        hi_y = spec.frame_height - half_h - travel_y
        if hi_x <= lo_x:
            vx, lo_x, hi_x = 0.0, slot * slot_w + half_w, max(slot * slot_w + half_w, (slot + 1) * slot_w - half_w)
        if hi_y <= lo_y:
            vy, lo_y, hi_y = 0.0, half_h, max(half_h, spec.frame_height - half_h)
        actors.append(_Actor(
            cx=float(rng.uniform(lo_x, hi_x)) if hi_x > lo_x else lo_x,
            cy=float(rng.uniform(lo_y, hi_y)) if hi_y > lo_y else lo_y,
            vx=vx, vy=vy, scale=scale,
            states=_states_for_action(action, spec, rng),
            phases=tuple(float(p) for p in rng.uniform(0.0, 2.0 * math.pi, size=spec.num_parts)),
        ))
    return actors


def _fill(image: np.ndarray, box: Tuple[float, float, float, float], color):
    x1, y1, x2, y2 = (int(v) for v in box)
    image[max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = color


def _render_actor(image: np.ndarray, actor: _Actor, t: int, num_parts: int) -> PersonGT:
    cx, cy = _actor_center(actor, t)
    torso = _to_int_box(cx, cy, TORSO_SIZE[0] * actor.scale, TORSO_SIZE[1] * actor.scale)
    _fill(image, torso, TORSO_COLOR)
    parts = []
    for part_id in range(num_parts):
        pcx, pcy, w, h, state = _part_geometry(actor, part_id, t)
        box = _to_int_box(pcx, pcy, w, h)
        _fill(image, box, PART_COLORS[part_id])
        if state > 0:
            ax, ay = STATE_AXES[state - 1]
            if ax == 0.0:
                _fill(image, _to_int_box(pcx, pcy, 1.0, box[3] - box[1]), (255, 255, 255))
            elif ay == 0.0:
                _fill(image, _to_int_box(pcx, pcy, box[2] - box[0], 1.0), (255, 255, 255))
            else:
                _fill(image, _to_int_box(pcx, pcy, 2.0, 2.0), (255, 255, 255))
        parts.append(PartGT(part_id=part_id, box=box, state_id=state))
    xs1 = [torso[0]] + [p.box[0] for p in parts]
    ys1 = [torso[1]] + [p.box[1] for p in parts]
    xs2 = [torso[2]] + [p.box[2] for p in parts]
    ys2 = [torso[3]] + [p.box[3] for p in parts]
    person_box = (min(xs1), min(ys1), max(xs2), max(ys2))
    return PersonGT(box=person_box, parts=tuple(parts))


def render_blank(width: int, height: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.integers(-NOISE, NOISE + 1, size=(height, width, 3))
    return np.clip(BACKGROUND + noise, 0, 255).astype(np.uint8)


def _generate_video(video_id: str, action: int, spec: SyntheticSpec,
                    seed_seq: np.random.SeedSequence) -> Tuple[VideoAnnotation, np.ndarray]:
    rng = np.random.default_rng(seed_seq)
    n_frames = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    actors = _place_actors(spec, action, n_frames, rng)
    pixels = np.empty((n_frames, spec.frame_height, spec.frame_width, 3), dtype=np.uint8)
    frames = []
    for t in range(n_frames):
        image = render_blank(spec.frame_width, spec.frame_height, seed=int(rng.integers(2 ** 31)))
        persons = tuple(_render_actor(image, actor, t, spec.num_parts) for actor in actors)
        pixels[t] = image
        frames.append(FrameGT(frame_index=t, persons=persons, frame_action_id=action))
    video = VideoAnnotation(video_id=video_id, action_id=action, frames=tuple(frames),
                            width=spec.frame_width, height=spec.frame_height)
    return video, pixels


def synth_generate(spec: SyntheticSpec, seed: int, config: Optional[DatasetConfig] = None,
                   show_progress: bool = False) -> SyntheticDataset:
    """
    Generates videos_per_class videos for each action. Identical (spec, seed)
    pairs give identical annotations and pixels.
    """
    spec.validate()
    if config is None:
        config = spec.default_config()
    elif (config.C, config.K, config.S) != (spec.num_actions, spec.num_parts, spec.num_states):
        raise ArgumentError(
            f"Synthetic spec (C={spec.num_actions}, K={spec.num_parts}, S={spec.num_states}) does not match "
            f"dataset config (C={config.C}, K={config.K}, S={config.S})")
    elif config.none_state != 0:
        raise ArgumentError("Synthetic data needs the 'none' state at index 0")

    total = spec.num_actions * spec.videos_per_class
    children = np.random.SeedSequence(seed).spawn(total)
    videos, frames = [], {}
    jobs = [(action, i) for action in range(spec.num_actions) for i in range(spec.videos_per_class)]
    for (action, i), child in tqdm(list(zip(jobs, children)), desc="[Synth] videos", disable=not show_progress):
        video_id = f"synth_{action:02d}_{i:04d}"
        video, pixels = _generate_video(video_id, action, spec, child)
        videos.append(video)
        frames[video_id] = pixels
    return SyntheticDataset(config=config, videos=videos, frames=frames)
