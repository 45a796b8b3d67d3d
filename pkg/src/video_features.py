"""
Video-level feature providers.

Two provider slots feed the fusion classifier: a 768-dim slot (TimeSformer-style
model) and a 1024-dim slot (Swin-style video transformer). At desk scale both slots are filled by
one tiny 3D-convolutional classifier with two embedding heads; any other model
can be registered under a name and selected with VIDEO_PROVIDER.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.checkpoints import module_checksum
from src.dataset import VideoAnnotation
from src.errors import ArgumentError, ConfigurationError
from src.tools.frame_store import FrameStore


@dataclass
class VideoBackboneFeatures:
    f_t: Optional[torch.Tensor] = None  # (768,)
    f_s: Optional[torch.Tensor] = None  # (1024,)

    DIM_T = 768
    DIM_S = 1024

    def __post_init__(self):
        if self.f_t is not None and self.f_t.shape[-1] != self.DIM_T:
            raise ConfigurationError(f"f_v^t must have {self.DIM_T} dimensions, got {self.f_t.shape[-1]}")
        if self.f_s is not None and self.f_s.shape[-1] != self.DIM_S:
            raise ConfigurationError(f"f_v^s must have {self.DIM_S} dimensions, got {self.f_s.shape[-1]}")

    @property
    def has_t(self) -> bool:
        return self.f_t is not None

    @property
    def has_s(self) -> bool:
        return self.f_s is not None


class StubVideoModel(nn.Module):
    """Two 3D convolutions, global pooling, two embedding heads and a classifier per head."""

    CLIP_FRAMES = 8
    CLIP_SIZE = (48, 48)

    def __init__(self, num_actions: int, width: int = 32):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv3d(3, 16, 3, padding=1), nn.ReLU(),
            nn.Conv3d(16, width, 3, stride=(1, 2, 2), padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool3d(1),
        )
        self.embed_t = nn.Linear(width, VideoBackboneFeatures.DIM_T)
        self.embed_s = nn.Linear(width, VideoBackboneFeatures.DIM_S)
        self.classify_t = nn.Linear(VideoBackboneFeatures.DIM_T, num_actions)
        self.classify_s = nn.Linear(VideoBackboneFeatures.DIM_S, num_actions)

    def forward(self, clips: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """clips: (B, 3, T, H, W) -> (f_t, f_s, logits_t, logits_s)."""
        pooled = self.stem(clips).flatten(1)
        f_t = F.relu(self.embed_t(pooled))
        f_s = F.relu(self.embed_s(pooled))
        return f_t, f_s, self.classify_t(f_t), self.classify_s(f_s)

    def loss(self, clips: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        _, _, logits_t, logits_s = self(clips)
        return F.cross_entropy(logits_t, actions) + F.cross_entropy(logits_s, actions)


def clip_indices(frame_indices: Sequence[int], clip_frames: int) -> List[int]:
    """Evenly spaced frame indices (repeats allowed for short videos)."""
    if not frame_indices:
        raise ArgumentError("Cannot build a clip from a video with no frames")
    positions = np.linspace(0, len(frame_indices) - 1, clip_frames).round().astype(int)
    return [int(frame_indices[p]) for p in positions]


def load_clip(video: VideoAnnotation, store: FrameStore, flip: bool = False) -> torch.Tensor:
    """(3, CLIP_FRAMES, h, w) float clip in [0, 1]."""
    indices = clip_indices([f.frame_index for f in video.frames], StubVideoModel.CLIP_FRAMES)
    pixels = np.stack([store.frame(video.video_id, i) for i in indices])
    if flip:
        pixels = pixels[:, :, ::-1, :]
    clip = torch.from_numpy(np.ascontiguousarray(pixels)).permute(0, 3, 1, 2).float() / 255.0
    clip = F.interpolate(clip, size=StubVideoModel.CLIP_SIZE, mode="bilinear", align_corners=False)
    return clip.permute(1, 0, 2, 3)


class VideoFeatureProvider:
    """Callable returning VideoBackboneFeatures for a video; checksum keys the feature cache."""

    name = "none"

    @property
    def checksum(self) -> str:
        return "none"

    def __call__(self, video: VideoAnnotation, store: FrameStore) -> VideoBackboneFeatures:
        return VideoBackboneFeatures()


class StubVideoProvider(VideoFeatureProvider):
    name = "stub"

    def __init__(self, model: StubVideoModel):
        self.model = model.eval()

    @property
    def checksum(self) -> str:
        return module_checksum(self.model)

    @torch.no_grad()
    def __call__(self, video: VideoAnnotation, store: FrameStore) -> VideoBackboneFeatures:
        f_t, f_s, _, _ = self.model(load_clip(video, store).unsqueeze(0))
        return VideoBackboneFeatures(f_t=f_t[0], f_s=f_s[0])


_PROVIDERS: Dict[str, Callable[..., VideoFeatureProvider]] = {"stub": StubVideoProvider}


def register_provider(name: str, factory: Callable[..., VideoFeatureProvider]):
    _PROVIDERS[name] = factory


def provider_factory(name: Optional[str]) -> Optional[Callable[..., VideoFeatureProvider]]:
    if not name:
        return None
    return _PROVIDERS.get(name)


def video_feature_provider(video: VideoAnnotation, store: FrameStore,
                           provider: Optional[VideoFeatureProvider] = None) -> VideoBackboneFeatures:
    """Features from the registered provider; absent flags when none is registered."""
    if provider is None:
        return VideoBackboneFeatures()
    return provider(video, store)
