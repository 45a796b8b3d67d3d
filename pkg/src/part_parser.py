"""
Single-person part parser.

A person crop goes through a visual network producing a 48-channel map f.
The Part Parsing Module (three convolutions) turns f into part features f_pa
and one heatmap per part; the State Parsing Module (global average pooling,
two fully connected layers, one linear layer) turns f into the 192-dim state
feature f_sta and per-part state distributions. Training minimizes
l_part = MSE(O, O*) + lambda * l_s.

Four variants share this skeleton:
    shared               K*S heatmaps indexed (part, state)
    separated_heatmaps   K part heatmaps + S state heatmaps
    state_vectors        K heatmaps + state vectors, cross-entropy l_s
    state_vectors_focal  K heatmaps + state vectors, focal l_s (default)
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from src.errors import ArgumentError, ConfigurationError
from src.tools.boxes import Box, pad_box
from src.tools.heatmaps import (
    CropGeometry,
    DecodedPart,
    decode_parts,
    decode_shared,
    decode_states,
    encode_gt_heatmaps,
    encode_shared_heatmaps,
    encode_state_heatmaps,
)

VISUAL_FEATURE_DIM = 48
STATE_FEATURE_DIM = 192
VARIANTS = ("shared", "separated_heatmaps", "state_vectors", "state_vectors_focal")
IGNORE_STATE = -1


@dataclass(frozen=True)
class ParserSettings:
    num_parts: int
    num_states: int
    variant: str = "state_vectors_focal"
    tau: float = 0.5
    lam: float = 0.5
    gamma: float = 2.0
    alpha: float = 0.25
    input_height: int = 256
    input_width: int = 192
    stride: int = 4
    crop_padding: float = 1.1
    image_mean: Tuple[float, float, float] = (0.2, 0.2, 0.2)
    image_std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"Unknown part parser variant '{self.variant}' (expected one of {VARIANTS})")
        if self.input_height % self.stride or self.input_width % self.stride:
            raise ConfigurationError(
                f"Input size {self.input_height}x{self.input_width} is not divisible by stride {self.stride}")

    @property
    def heatmap_size(self) -> Tuple[int, int]:
        return self.input_height // self.stride, self.input_width // self.stride

    @property
    def heatmap_channels(self) -> int:
        if self.variant == "shared":
            return self.num_parts * self.num_states
        if self.variant == "separated_heatmaps":
            return self.num_parts + self.num_states
        return self.num_parts

    @property
    def uses_state_vectors(self) -> bool:
        return self.variant.startswith("state_vectors")

    def geometry(self, box: Box) -> CropGeometry:
        return CropGeometry(box=tuple(float(v) for v in box), input_height=self.input_height,
                            input_width=self.input_width, stride=self.stride)


@dataclass
class PersonCrop:
    image: torch.Tensor  # (3, H, W) normalized
    geometry: CropGeometry


@dataclass
class StateOutput:
    f_sta: torch.Tensor   # (B, 192)
    logits: torch.Tensor  # (B, K, S)
    D_sta: torch.Tensor   # (B, K, S), softmax over S

    def __post_init__(self):
        if self.f_sta.shape[-1] != STATE_FEATURE_DIM:
            raise ValueError(f"f_sta must have {STATE_FEATURE_DIM} dimensions, got {self.f_sta.shape[-1]}")


@dataclass
class ParserOutput:
    f: torch.Tensor
    f_pa: torch.Tensor
    heatmaps: torch.Tensor  # (B, heatmap_channels, H_h, W_h)
    state: StateOutput
    num_parts: int
    variant: str

    @property
    def part_maps(self) -> torch.Tensor:
        if self.variant == "separated_heatmaps":
            return self.heatmaps[:, :self.num_parts]
        return self.heatmaps

    @property
    def state_maps(self) -> Optional[torch.Tensor]:
        if self.variant == "separated_heatmaps":
            return self.heatmaps[:, self.num_parts:]
        return None


@dataclass
class PartLossBreakdown:
    l_p: torch.Tensor
    l_s: torch.Tensor
    l_part: torch.Tensor
    lam: float

    def as_floats(self) -> Dict[str, float]:
        return {"l_p": float(self.l_p.detach()), "l_s": float(self.l_s.detach()),
                "l_part": float(self.l_part.detach())}


@dataclass
class PartParse:
    """Parsing result for one person crop."""

    geometry: CropGeometry
    parts: List[DecodedPart]
    f_pa: torch.Tensor                   # (48, H_h, W_h)
    f_sta: torch.Tensor                  # (192,)
    state_distribution: Optional[np.ndarray] = None  # (K, S), state-vector variants only
    heatmaps: Optional[np.ndarray] = field(default=None, repr=False)


# ----------------------------------------------------------------------------
# Networks
# ----------------------------------------------------------------------------

class ToyVisualBackbone(nn.Module):
    """Stride-4 convolutional stack ending in 48 channels."""

    stride = 4

    def __init__(self, out_channels: int = VISUAL_FEATURE_DIM):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(48, 48, 3, padding=1), nn.ReLU(),
            nn.Conv2d(48, out_channels, 3, padding=1), nn.ReLU(),
        )
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class PartParsingModule(nn.Module):
    def __init__(self, out_channels: int, in_channels: int = VISUAL_FEATURE_DIM):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, VISUAL_FEATURE_DIM, 3, padding=1), nn.ReLU(),
            nn.Conv2d(VISUAL_FEATURE_DIM, VISUAL_FEATURE_DIM, 3, padding=1), nn.ReLU(),
        )
        self.heatmap = nn.Conv2d(VISUAL_FEATURE_DIM, out_channels, 1)

    def forward(self, f: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        f_pa = self.features(f)
        return f_pa, self.heatmap(f_pa)


class StateParsingModule(nn.Module):
    """GAP -> FC -> FC (f_sta) -> linear; one S-way head per part."""

    def __init__(self, num_heads: int, num_states: int, in_channels: int = VISUAL_FEATURE_DIM):
        super().__init__()
        self.num_heads = num_heads
        self.num_states = num_states
        self.fc = nn.Sequential(
            nn.Linear(in_channels, STATE_FEATURE_DIM), nn.ReLU(),
            nn.Linear(STATE_FEATURE_DIM, STATE_FEATURE_DIM), nn.ReLU(),
        )
        self.classifier = nn.Linear(STATE_FEATURE_DIM, num_heads * num_states)

    def forward(self, f: torch.Tensor) -> StateOutput:
        f_sta = self.fc(f.mean(dim=(-2, -1)))
        logits = self.classifier(f_sta).view(-1, self.num_heads, self.num_states)
        return StateOutput(f_sta=f_sta, logits=logits, D_sta=F.softmax(logits, dim=-1))


def check_visual_backbone(backbone: nn.Module, settings: ParserSettings) -> None:
    """Probe at the configured input size: 48 channels at input / stride resolution."""
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        out = backbone(torch.zeros(1, 3, settings.input_height, settings.input_width))
    backbone.train(was_training)
    if out.dim() != 4 or out.shape[1] != VISUAL_FEATURE_DIM:
        raise ConfigurationError(
            f"Part parser backbone must output d={VISUAL_FEATURE_DIM} channels, got shape {tuple(out.shape)}")
    if tuple(out.shape[2:]) != settings.heatmap_size:
        raise ConfigurationError(
            f"Part parser backbone output {tuple(out.shape[2:])} does not match input / stride "
            f"{settings.heatmap_size}")


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------

def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25,
               reduction: str = "mean") -> torch.Tensor:
    """FL = -alpha * (1 - p_t)^gamma * log p_t over S-way logits; (S,) or (N, S) input."""
    if logits.dim() == 1:
        logits, target = logits.unsqueeze(0), target.reshape(1)
    ce = F.cross_entropy(logits, target.long(), reduction="none")
    p_t = torch.exp(-ce)
    loss = alpha * (1.0 - p_t) ** gamma * ce
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def part_loss(O: torch.Tensor, O_star: torch.Tensor, D_sta_logits: Optional[torch.Tensor],
              target: Optional[torch.Tensor], lam: float = 0.5, focal: bool = True,
              gamma: float = 2.0, alpha: float = 0.25) -> PartLossBreakdown:
    """
    l_p is the MSE over every heatmap cell. l_s runs over (crop, part) pairs whose
    target is not IGNORE_STATE; it is zero when no state logits are given.
    """
    if O.shape != O_star.shape:
        raise ArgumentError(f"Heatmap shape {tuple(O.shape)} does not match target {tuple(O_star.shape)}")
    l_p = F.mse_loss(O, O_star)
    if D_sta_logits is None or target is None:
        l_s = O.sum() * 0.0
    else:
        flat_logits = D_sta_logits.reshape(-1, D_sta_logits.shape[-1])
        flat_target = target.reshape(-1).long()
        valid = flat_target != IGNORE_STATE
        if not valid.any():
            l_s = flat_logits.sum() * 0.0
        elif focal:
            l_s = focal_loss(flat_logits[valid], flat_target[valid], gamma=gamma, alpha=alpha)
        else:
            l_s = F.cross_entropy(flat_logits[valid], flat_target[valid])
    return PartLossBreakdown(l_p=l_p, l_s=l_s, l_part=l_p + lam * l_s, lam=lam)


# ----------------------------------------------------------------------------
# Cropping
# ----------------------------------------------------------------------------

def crop_person(image: np.ndarray, box: Sequence[float], settings: ParserSettings,
                padding: float = 1.0) -> PersonCrop:
    """Bilinear crop-and-resize of a uint8 H x W x 3 frame to the parser input size."""
    height, width = image.shape[:2]
    x1, y1, x2, y2 = pad_box(box, padding, width, height) if padding != 1.0 else tuple(float(v) for v in box)
    # Degenerate detector boxes still yield a one-pixel crop.
    x2 = max(x2, x1 + 1.0)
    y2 = max(y2, y1 + 1.0)
    source = (x1, y1, x2, y2)
    pixels = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float().unsqueeze(0) / 255.0
    resized = roi_align(pixels, [torch.tensor([source], dtype=torch.float32)],
                        output_size=(settings.input_height, settings.input_width),
                        spatial_scale=1.0, sampling_ratio=2, aligned=True)[0]
    mean = torch.tensor(settings.image_mean).view(3, 1, 1)
    std = torch.tensor(settings.image_std).view(3, 1, 1)
    return PersonCrop(image=(resized - mean) / std, geometry=settings.geometry(source))


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

class PartParser(nn.Module):
    def __init__(self, settings: ParserSettings, backbone: Optional[nn.Module] = None):
        super().__init__()
        self.settings = settings
        self.backbone = backbone if backbone is not None else ToyVisualBackbone()
        check_visual_backbone(self.backbone, settings)
        self.ppm = PartParsingModule(settings.heatmap_channels)
        self.spm = StateParsingModule(settings.num_parts, settings.num_states)

    def register_backbone(self, backbone: nn.Module):
        check_visual_backbone(backbone, self.settings)
        self.backbone = backbone

    def visual_forward(self, images: torch.Tensor) -> torch.Tensor:
        f = self.backbone(images)
        if f.shape[1] != VISUAL_FEATURE_DIM:
            raise ConfigurationError(f"Visual feature must have d={VISUAL_FEATURE_DIM}, got {f.shape[1]}")
        return f

    def ppm_forward(self, f: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.ppm(f)

    def spm_forward(self, f: torch.Tensor) -> StateOutput:
        return self.spm(f)

    def variant_forward(self, f: torch.Tensor, variant_id: Optional[str] = None) -> ParserOutput:
        variant = variant_id or self.settings.variant
        if variant not in VARIANTS:
            raise ConfigurationError(f"Unknown part parser variant '{variant}'")
        if variant != self.settings.variant:
            raise ConfigurationError(
                f"Parser was built for variant '{self.settings.variant}', cannot run '{variant}'")
        f_pa, O = self.ppm_forward(f)
        return ParserOutput(f=f, f_pa=f_pa, heatmaps=O, state=self.spm_forward(f),
                            num_parts=self.settings.num_parts, variant=variant)

    def forward(self, images: torch.Tensor) -> ParserOutput:
        return self.variant_forward(self.visual_forward(images))

    def build_targets(self, parts_per_crop: Sequence[Sequence], geometries: Sequence[CropGeometry]
                      ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Heatmap targets for the active variant and (B, K) state targets (IGNORE_STATE for absent parts)."""
        K, S = self.settings.num_parts, self.settings.num_states
        maps, states = [], []
        for parts, geometry in zip(parts_per_crop, geometries):
            if self.settings.variant == "shared":
                maps.append(encode_shared_heatmaps(parts, geometry, K, S))
            elif self.settings.variant == "separated_heatmaps":
                maps.append(np.concatenate([encode_gt_heatmaps(parts, geometry, K),
                                            encode_state_heatmaps(parts, geometry, S)]))
            else:
                maps.append(encode_gt_heatmaps(parts, geometry, K))
            row = np.full(K, IGNORE_STATE, dtype=np.int64)
            for part in parts:
                row[part.part_id] = part.state_id
            states.append(row)
        return torch.from_numpy(np.stack(maps)), torch.from_numpy(np.stack(states))

    def compute_losses(self, images: torch.Tensor, parts_per_crop: Sequence[Sequence],
                       geometries: Sequence[CropGeometry]) -> PartLossBreakdown:
        out = self(images)
        O_star, state_targets = self.build_targets(parts_per_crop, geometries)
        if not self.settings.uses_state_vectors:
            return part_loss(out.heatmaps, O_star, None, None, lam=self.settings.lam)
        return part_loss(out.heatmaps, O_star, out.state.logits, state_targets, lam=self.settings.lam,
                         focal=self.settings.variant == "state_vectors_focal",
                         gamma=self.settings.gamma, alpha=self.settings.alpha)

    @torch.no_grad()
    def parse(self, crops: Sequence[PersonCrop]) -> List[PartParse]:
        if not crops:
            return []
        out = self(torch.stack([c.image for c in crops]))
        K, S, tau = self.settings.num_parts, self.settings.num_states, self.settings.tau
        results = []
        for b, crop in enumerate(crops):
            heatmaps = out.heatmaps[b].numpy()
            distribution = None
            if self.settings.variant == "shared":
                parts = decode_shared(heatmaps, tau, crop.geometry, K, S)
            elif self.settings.variant == "separated_heatmaps":
                parts = decode_parts(out.part_maps[b].numpy(), tau, crop.geometry)
                state_maps = out.state_maps[b].numpy()
                for part in parts:
                    part.state_id, part.state_confidence = decode_states(state_maps, part.region)
            else:
                distribution = out.state.D_sta[b].numpy().astype(np.float64)
                parts = decode_parts(heatmaps, tau, crop.geometry)
                for part in parts:
                    part.state_id = int(np.argmax(distribution[part.part_id]))
                    part.state_confidence = float(distribution[part.part_id, part.state_id])
            results.append(PartParse(geometry=crop.geometry, parts=parts, f_pa=out.f_pa[b],
                                     f_sta=out.state.f_sta[b], state_distribution=distribution,
                                     heatmaps=heatmaps))
        return results
