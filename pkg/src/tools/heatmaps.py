"""
Binary-mask part heatmaps: crop geometry, rasterization of ground-truth boxes
and decoding of predicted maps back into frame-space boxes.

Rasterization rule: cell (i, j) is 1 for a box when its center
((j + 0.5) * stride, (i + 0.5) * stride) satisfies x1 <= cx < x2 and y1 <= cy < y2.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class CropGeometry:
    """Affine map between a frame-space source box and the crop / heatmap grid."""

    box: Box
    input_height: int
    input_width: int
    stride: int

    @property
    def heatmap_size(self) -> Tuple[int, int]:
        return self.input_height // self.stride, self.input_width // self.stride

    @property
    def scale_x(self) -> float:
        return self.input_width / (self.box[2] - self.box[0])

    @property
    def scale_y(self) -> float:
        return self.input_height / (self.box[3] - self.box[1])

    def to_crop(self, box: Sequence[float]) -> Box:
        x1, y1, x2, y2 = box
        return ((x1 - self.box[0]) * self.scale_x, (y1 - self.box[1]) * self.scale_y,
                (x2 - self.box[0]) * self.scale_x, (y2 - self.box[1]) * self.scale_y)

    def to_frame(self, box: Sequence[float]) -> Box:
        x1, y1, x2, y2 = box
        return (self.box[0] + x1 / self.scale_x, self.box[1] + y1 / self.scale_y,
                self.box[0] + x2 / self.scale_x, self.box[1] + y2 / self.scale_y)


@dataclass
class DecodedPart:
    part_id: int
    box: Box               # frame pixels
    confidence: float      # mean activation over the kept region
    region: Optional[np.ndarray] = None  # (H_h, W_h) bool mask of the kept region
    state_id: Optional[int] = None
    state_confidence: Optional[float] = None


def _cell_centers(n: int, stride: int) -> np.ndarray:
    return (np.arange(n, dtype=np.float64) + 0.5) * stride


def rasterize_box(box: Sequence[float], heatmap_size: Tuple[int, int], stride: int) -> np.ndarray:
    """(H_h, W_h) float32 mask of the cells whose centers fall inside a crop-space box."""
    H_h, W_h = heatmap_size
    x1, y1, x2, y2 = box
    cx = _cell_centers(W_h, stride)
    cy = _cell_centers(H_h, stride)
    cols = (cx >= x1) & (cx < x2)
    rows = (cy >= y1) & (cy < y2)
    return np.outer(rows, cols).astype(np.float32)


def _crop_box(part_box: Sequence[float], geometry: CropGeometry) -> Box:
    x1, y1, x2, y2 = geometry.to_crop(part_box)
    W, H = geometry.input_width, geometry.input_height
    return (min(max(x1, 0.0), W), min(max(y1, 0.0), H), min(max(x2, 0.0), W), min(max(y2, 0.0), H))


def encode_gt_heatmaps(parts: Sequence, geometry: CropGeometry, num_parts: int) -> np.ndarray:
    """O*: one binary channel per part id; absent parts leave an all-zero channel."""
    H_h, W_h = geometry.heatmap_size
    target = np.zeros((num_parts, H_h, W_h), dtype=np.float32)
    for part in parts:
        mask = rasterize_box(_crop_box(part.box, geometry), (H_h, W_h), geometry.stride)
        target[part.part_id] = np.maximum(target[part.part_id], mask)
    return target


def encode_state_heatmaps(parts: Sequence, geometry: CropGeometry, num_states: int) -> np.ndarray:
    """One binary channel per state: the union of the areas of parts currently in that state."""
    H_h, W_h = geometry.heatmap_size
    target = np.zeros((num_states, H_h, W_h), dtype=np.float32)
    for part in parts:
        mask = rasterize_box(_crop_box(part.box, geometry), (H_h, W_h), geometry.stride)
        target[part.state_id] = np.maximum(target[part.state_id], mask)
    return target


def encode_shared_heatmaps(parts: Sequence, geometry: CropGeometry, num_parts: int, num_states: int) -> np.ndarray:
    """K*S channels indexed part_id * S + state_id; a part lights only the channel of its state."""
    H_h, W_h = geometry.heatmap_size
    target = np.zeros((num_parts * num_states, H_h, W_h), dtype=np.float32)
    for part in parts:
        mask = rasterize_box(_crop_box(part.box, geometry), (H_h, W_h), geometry.stride)
        channel = part.part_id * num_states + part.state_id
        target[channel] = np.maximum(target[channel], mask)
    return target


def largest_region(score_map: np.ndarray, tau: float) -> Optional[np.ndarray]:
    """Boolean mask of the largest 4-connected region with values >= tau (lowest label on ties)."""
    mask = score_map >= tau
    labels, count = ndimage.label(mask)
    if count == 0:
        return None
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def region_box(region: np.ndarray, stride: int) -> Box:
    """Tight crop-space box of a region, in whole cells."""
    rows, cols = np.nonzero(region)
    return (float(cols.min() * stride), float(rows.min() * stride),
            float((cols.max() + 1) * stride), float((rows.max() + 1) * stride))


def decode_parts(heatmaps: np.ndarray, tau: float, geometry: CropGeometry) -> List[DecodedPart]:
    """
    Per channel: threshold at tau, keep the largest connected region, emit its
    tight box mapped back to frame pixels with the region's mean activation as
    confidence. Channels with no cell >= tau emit nothing.
    """
    decoded = []
    for part_id in range(heatmaps.shape[0]):
        score_map = np.asarray(heatmaps[part_id], dtype=np.float64)
        region = largest_region(score_map, tau)
        if region is None:
            continue
        crop_box = region_box(region, geometry.stride)
        decoded.append(DecodedPart(
            part_id=part_id,
            box=geometry.to_frame(crop_box),
            confidence=float(score_map[region].mean()),
            region=region,
        ))
    return decoded


def decode_states(state_maps: np.ndarray, region: np.ndarray) -> Tuple[int, float]:
    """State whose map has the highest mean activation inside a region (lowest index on ties)."""
    means = np.array([float(np.asarray(m, dtype=np.float64)[region].mean()) for m in state_maps])
    state_id = int(np.argmax(means))
    return state_id, float(means[state_id])


def decode_shared(heatmaps: np.ndarray, tau: float, geometry: CropGeometry, num_parts: int,
                  num_states: int) -> List[DecodedPart]:
    """K*S maps: locate each part on the max over its S channels, then read the state inside the region."""
    H_h, W_h = heatmaps.shape[-2:]
    grouped = np.asarray(heatmaps, dtype=np.float64).reshape(num_parts, num_states, H_h, W_h)
    decoded = decode_parts(grouped.max(axis=1), tau, geometry)
    for part in decoded:
        part.state_id, part.state_confidence = decode_states(grouped[part.part_id], part.region)
    return decoded
