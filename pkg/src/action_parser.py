"""
Video-level action parsing by late fusion.

Non-video features are read from the latent layers of the frozen detector and
part parser on T sampled frames and the top-P persons of each frame:
    frame     f_c    (T, 2048)      GCP
    instance  f_ia   (T, P, 256)    AP-RCNN
    part      f'_pa  (T, P, 48)     PPM, spatially averaged
    state     f_sta  (T, P, 192)    SPM
Each family has its own two-layer MLP. Person families are max-pooled over P
(padded slots masked out) and then over T; the frame family over T only. The
pooled vectors are concatenated with the video-backbone embeddings that are
present and classified by one linear layer.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.dataset import VideoAnnotation, sample_frames
from src.detector import (
    BACKBONE_CHANNELS,
    INSTANCE_FEATURE_DIM,
    FrameDetections,
    PersonDetector,
    select_top_boxes,
)
from src.errors import ArgumentError, ConfigurationError
from src.part_parser import STATE_FEATURE_DIM, VISUAL_FEATURE_DIM, PartParse, PartParser, crop_person
from src.tools.frame_store import FrameStore
from src.video_features import VideoBackboneFeatures

NONVIDEO_FAMILIES = ("frame", "instance", "part", "state")
VIDEO_FAMILIES = ("video_t", "video_s")
FAMILIES = NONVIDEO_FAMILIES + VIDEO_FAMILIES
FAMILY_DIMS = {
    "frame": BACKBONE_CHANNELS,
    "instance": INSTANCE_FEATURE_DIM,
    "part": VISUAL_FEATURE_DIM,
    "state": STATE_FEATURE_DIM,
    "video_t": VideoBackboneFeatures.DIM_T,
    "video_s": VideoBackboneFeatures.DIM_S,
}
SCORE_TOLERANCE = 1e-6


@dataclass
class NonVideoFeatures:
    """Per-video tensors; an optional leading batch dimension is allowed on every field."""

    f_c: torch.Tensor   # (T, 2048)
    f_ia: torch.Tensor  # (T, P, 256)
    f_pa: torch.Tensor  # (T, P, 48)
    f_sta: torch.Tensor  # (T, P, 192)
    mask: torch.Tensor  # (T, P) bool

    def __post_init__(self):
        T, P = self.mask.shape[-2:]
        expected = {
            "f_c": (T, BACKBONE_CHANNELS),
            "f_ia": (T, P, INSTANCE_FEATURE_DIM),
            "f_pa": (T, P, VISUAL_FEATURE_DIM),
            "f_sta": (T, P, STATE_FEATURE_DIM),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(self, name).shape[-len(shape):])
            if actual != shape:
                raise ValueError(f"{name} has trailing shape {actual}, expected {shape}")

    @property
    def T(self) -> int:
        return self.mask.shape[-2]

    @property
    def P(self) -> int:
        return self.mask.shape[-1]

    def family(self, name: str) -> torch.Tensor:
        return {"frame": self.f_c, "instance": self.f_ia, "part": self.f_pa, "state": self.f_sta}[name]

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name).detach().cpu().numpy()
                for name in ("f_c", "f_ia", "f_pa", "f_sta", "mask")}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "NonVideoFeatures":
        return cls(**{name: torch.from_numpy(np.asarray(arrays[name]))
                      for name in ("f_c", "f_ia", "f_pa", "f_sta", "mask")})


def stack_features(features: Sequence[NonVideoFeatures]) -> NonVideoFeatures:
    return NonVideoFeatures(**{name: torch.stack([getattr(f, name) for f in features])
                               for name in ("f_c", "f_ia", "f_pa", "f_sta", "mask")})


@dataclass
class ActionScores:
    scores: np.ndarray  # (C,)
    provenance: str = "fusion"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if abs(float(self.scores.sum()) - 1.0) > SCORE_TOLERANCE:
            raise ValueError(f"Action scores must sum to 1, got {float(self.scores.sum())}")

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.scores))


@dataclass
class FrameParse:
    """Top-P detections of one frame with the part parse of each kept person."""

    detections: FrameDetections
    parses: List[PartParse]


# ----------------------------------------------------------------------------
# Feature extraction
# ----------------------------------------------------------------------------

def pool_part_features(f_pa: torch.Tensor) -> torch.Tensor:
    """Spatial average of (..., 48, H_h, W_h) part features."""
    return f_pa.mean(dim=(-2, -1))


def parse_frame(image: np.ndarray, detector: PersonDetector, parser: PartParser, P: int) -> FrameParse:
    detections = select_top_boxes(detector.detect_frame(image), P)
    crops = [crop_person(image, scored.box, parser.settings, padding=parser.settings.crop_padding)
             for scored in detections.boxes]
    return FrameParse(detections=detections, parses=parser.parse(crops))


def assemble_features(frame_parses: Sequence[FrameParse], P: int) -> NonVideoFeatures:
    """Stacks per-frame parses into fixed (T, P) tensors; empty person slots are zero with mask false."""
    T = len(frame_parses)
    f_c = torch.zeros(T, BACKBONE_CHANNELS)
    f_ia = torch.zeros(T, P, INSTANCE_FEATURE_DIM)
    f_pa = torch.zeros(T, P, VISUAL_FEATURE_DIM)
    f_sta = torch.zeros(T, P, STATE_FEATURE_DIM)
    mask = torch.zeros(T, P, dtype=torch.bool)
    for t, frame in enumerate(frame_parses):
        f_c[t] = frame.detections.frame.f_c
        n = min(len(frame.detections.boxes), P)
        if n == 0:
            continue
        f_ia[t, :n] = frame.detections.instance.f_ia[:n]
        for p in range(n):
            f_pa[t, p] = pool_part_features(frame.parses[p].f_pa)
            f_sta[t, p] = frame.parses[p].f_sta
        mask[t, :n] = True
    return NonVideoFeatures(f_c=f_c, f_ia=f_ia, f_pa=f_pa, f_sta=f_sta, mask=mask)


@torch.no_grad()
def extract_nonvideo_features(video: VideoAnnotation, store: FrameStore, detector: PersonDetector,
                              parser: PartParser, T: int, P: int, seed: int,
                              parsed: Optional[Dict[int, FrameParse]] = None) -> NonVideoFeatures:
    """
    Features of T frames drawn by sample_frames. `parsed` caches frame parses by
    frame index so repeated draws and later prediction reuse them.
    """
    if P < 1:
        raise ArgumentError(f"P must be >= 1, got {P}")
    parsed = {} if parsed is None else parsed
    frame_parses = []
    for index in sample_frames(video, T, seed):
        if index not in parsed:
            parsed[index] = parse_frame(store.frame(video.video_id, index), detector, parser, P)
        frame_parses.append(parsed[index])
    return assemble_features(frame_parses, P)


# ----------------------------------------------------------------------------
# Pooling
# ----------------------------------------------------------------------------

def max_pool_persons(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """(..., T, P, D) -> (..., T, D); padded slots never win, all-padded frames give zeros."""
    filled = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    pooled = filled.max(dim=-2).values
    any_valid = mask.any(dim=-1, keepdim=True)
    return torch.where(any_valid, pooled, torch.zeros_like(pooled))


def max_pool_frames(x: torch.Tensor) -> torch.Tensor:
    """(..., T, D) -> (..., D)."""
    return x.max(dim=-2).values


# ----------------------------------------------------------------------------
# Fusion
# ----------------------------------------------------------------------------

class FamilyMLP(nn.Sequential):
    def __init__(self, in_dim: int, hidden_width: int):
        super().__init__(nn.Linear(in_dim, hidden_width), nn.ReLU(), nn.Linear(hidden_width, hidden_width))


def check_families(families: Sequence[str]) -> Tuple[str, ...]:
    if not families:
        raise ConfigurationError("At least one feature family must be enabled for action parsing")
    unknown = [f for f in families if f not in FAMILIES]
    if unknown:
        raise ConfigurationError(f"Unknown feature families {unknown} (expected a subset of {FAMILIES})")
    # Canonical order fixes the classifier layout.
    return tuple(f for f in FAMILIES if f in families)


class FusionNet(nn.Module):
    def __init__(self, num_actions: int, families: Sequence[str] = NONVIDEO_FAMILIES, hidden_width: int = 512):
        super().__init__()
        self.families = check_families(families)
        self.hidden_width = hidden_width
        self.mlps = nn.ModuleDict({
            name: FamilyMLP(FAMILY_DIMS[name], hidden_width)
            for name in self.families if name in NONVIDEO_FAMILIES
        })
        width = sum(hidden_width if name in NONVIDEO_FAMILIES else FAMILY_DIMS[name] for name in self.families)
        self.classifier = nn.Linear(width, num_actions)

    @property
    def video_families(self) -> Tuple[str, ...]:
        return tuple(f for f in self.families if f in VIDEO_FAMILIES)

    def pool_families(self, nvf: NonVideoFeatures) -> Dict[str, torch.Tensor]:
        pooled = {}
        for name, mlp in self.mlps.items():
            encoded = mlp(nvf.family(name))
            if name == "frame":
                pooled[name] = max_pool_frames(encoded)
            else:
                pooled[name] = max_pool_frames(max_pool_persons(encoded, nvf.mask))
        return pooled

    def mlp_fuse(self, nvf: NonVideoFeatures) -> torch.Tensor:
        """Concatenated pooled non-video families, (..., n_families * hidden_width)."""
        pooled = self.pool_families(nvf)
        if not pooled:
            return nvf.f_c.new_zeros(nvf.f_c.shape[:-2] + (0,))
        return torch.cat([pooled[name] for name in self.families if name in pooled], dim=-1)

    def concat_predict(self, fused: torch.Tensor, vbf: Optional[VideoBackboneFeatures] = None) -> torch.Tensor:
        """Logits of the linear classifier over [fused, f_v^t, f_v^s] for the configured families."""
        pieces = [fused] if fused.shape[-1] > 0 else []
        for name in self.video_families:
            vector = None if vbf is None else (vbf.f_t if name == "video_t" else vbf.f_s)
            if vector is None:
                raise ConfigurationError(f"Feature family '{name}' is enabled but no video provider supplied it")
            pieces.append(vector.to(fused.dtype))
        if not pieces:
            raise ConfigurationError("No feature family is present for the action classifier")
        return self.classifier(torch.cat(pieces, dim=-1))

    def forward(self, nvf: NonVideoFeatures, vbf: Optional[VideoBackboneFeatures] = None) -> torch.Tensor:
        return self.concat_predict(self.mlp_fuse(nvf), vbf)

    @torch.no_grad()
    def predict(self, nvf: NonVideoFeatures, vbf: Optional[VideoBackboneFeatures] = None) -> ActionScores:
        logits = self(nvf, vbf)
        probs = F.softmax(logits.double(), dim=-1).numpy()
        return ActionScores(scores=probs / probs.sum(), provenance="+".join(self.families))


def ensemble(score_list: Sequence[ActionScores], weights: Optional[Sequence[float]] = None) -> ActionScores:
    """Weighted arithmetic mean of probability vectors, renormalized (uniform weights by default)."""
    if not score_list:
        raise ArgumentError("ensemble needs at least one score vector")
    lengths = {len(s.scores) for s in score_list}
    if len(lengths) != 1:
        raise ArgumentError(f"Score vectors have mismatched lengths {sorted(lengths)}")
    if weights is None:
        weights = [1.0] * len(score_list)
    if len(weights) != len(score_list):
        raise ArgumentError(f"Got {len(weights)} weights for {len(score_list)} score vectors")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ArgumentError("Ensemble weights must be non-negative with a positive sum")
    mixed = (w[:, None] * np.stack([s.scores for s in score_list])).sum(axis=0) / w.sum()
    return ActionScores(scores=mixed / mixed.sum(),
                        provenance="ensemble(" + ",".join(s.provenance for s in score_list) + ")")
