"""
Box geometry shared by the detector and the metrics: IoU, anchors, delta
encoding and the score-ordered selection helpers.
"""

import math
from typing import List, Sequence, Tuple

import torch

Box = Tuple[float, float, float, float]

# Clamp for the log-scale deltas so exp() never overflows on a bad regression.
BBOX_XFORM_CLIP = math.log(1000.0 / 16)


def box_area(box: Sequence[float]) -> float:
    x1, y1, x2, y2 = box
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes; 0 when either box has zero area."""
    area_a = box_area(a)
    area_b = box_area(b)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def make_anchors(feat_h: int, feat_w: int, stride: int, sizes: Sequence[float],
                 ratios: Sequence[float]) -> torch.Tensor:
    """
    Anchors centered on every feature cell, ordered (cell_y, cell_x, size, ratio).
    ratio is height / width. Returns (feat_h * feat_w * A, 4).
    """
    base = []
    for size in sizes:
        for ratio in ratios:
            w = size / math.sqrt(ratio)
            h = size * math.sqrt(ratio)
            base.append((-w / 2, -h / 2, w / 2, h / 2))
    base_t = torch.tensor(base, dtype=torch.float32)
    ys = (torch.arange(feat_h, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    return (shifts + base_t.unsqueeze(0)).reshape(-1, 4)


def encode_deltas(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(dx, dy, dw, dh) of targets relative to anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return torch.stack([(tx - ax) / aw, (ty - ay) / ah, torch.log(tw / aw), torch.log(th / ah)], dim=1)


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dw = deltas[:, 2].clamp(max=BBOX_XFORM_CLIP)
    dh = deltas[:, 3].clamp(max=BBOX_XFORM_CLIP)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, width: int, height: int) -> torch.Tensor:
    return torch.stack([
        boxes[:, 0].clamp(0, width), boxes[:, 1].clamp(0, height),
        boxes[:, 2].clamp(0, width), boxes[:, 3].clamp(0, height),
    ], dim=1)


def score_order(scores: Sequence[float], boxes: Sequence[Sequence[float]]) -> List[int]:
    """Indices by descending score, then larger area, then lower index."""
    return sorted(range(len(scores)), key=lambda i: (-float(scores[i]), -box_area(boxes[i]), i))


def pad_box(box: Sequence[float], padding: float, width: int, height: int) -> Box:
    """Scales a box about its center by `padding` and clips it to the image."""
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    hw, hh = (x2 - x1) * padding / 2.0, (y2 - y1) * padding / 2.0
    return (max(0.0, cx - hw), max(0.0, cy - hh), min(float(width), cx + hw), min(float(height), cy + hh))
