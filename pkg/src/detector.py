"""
Person detector with two action heads.

The detection model is a single-stage anchor detector over a pluggable
backbone. Next to the box head sit the Global Context Parsing head (GCP:
global average pooling -> C-way classifier, frame-level action) and the
AP-RCNN head (four 256-channel convolutions over 7x7 pooled regions -> C-way
classifier, instance-level action). Training uses the four-term loss
l_det = l_cls + l_box + l_ins + l_img.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou, nms, roi_align

from src.errors import ArgumentError, ConfigurationError
from src.tools.boxes import (
    Box,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    make_anchors,
    score_order,
)

BACKBONE_CHANNELS = 2048
INSTANCE_FEATURE_DIM = 256
ROI_SIZE = 7
BOX_DELTAS = 8  # 2 classes (background, person) x 4 deltas
PERSON = 1
MAX_TRAIN_ROIS = 8


@dataclass(frozen=True)
class DetectorSettings:
    num_actions: int
    anchor_sizes: Tuple[float, ...] = (28.0, 40.0, 56.0)
    anchor_ratios: Tuple[float, ...] = (1.0, 1.4)
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    nms_iou: float = 0.5
    score_floor: float = 0.05
    max_detections: int = 20
    image_mean: Tuple[float, float, float] = (0.2, 0.2, 0.2)
    image_std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_ratios)


@dataclass
class BoxHeadOutput:
    P_cls: torch.Tensor  # (..., 2)
    P_box: torch.Tensor  # (..., 8)

    def __post_init__(self):
        if self.P_box.shape[-1] != BOX_DELTAS or self.P_cls.shape[-1] != 2:
            raise ValueError(f"Box head must emit 2 logits and {BOX_DELTAS} deltas per anchor")


@dataclass
class InstanceActionOutput:
    f_ia: torch.Tensor   # (N, 256)
    C_ins: torch.Tensor  # (N, C)

    def __post_init__(self):
        if self.f_ia.shape[-1] != INSTANCE_FEATURE_DIM:
            raise ValueError(f"f_ia must have {INSTANCE_FEATURE_DIM} dimensions, got {self.f_ia.shape[-1]}")


@dataclass
class FrameActionOutput:
    f_c: torch.Tensor    # (2048,) or (B, 2048)
    C_img: torch.Tensor  # (C,) or (B, C)

    def __post_init__(self):
        if self.f_c.shape[-1] != BACKBONE_CHANNELS:
            raise ValueError(f"f_c must have {BACKBONE_CHANNELS} dimensions, got {self.f_c.shape[-1]}")


@dataclass
class ScoredBox:
    box: Box
    score: float


@dataclass
class FrameDetections:
    boxes: List[ScoredBox]
    instance: InstanceActionOutput
    frame: FrameActionOutput

    def __post_init__(self):
        scores = [b.score for b in self.boxes]
        if any(not 0.0 <= s <= 1.0 for s in scores):
            raise ValueError("Detection scores must lie in [0, 1]")
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("Detections must be sorted by descending score")


@dataclass
class DetectionLossBreakdown:
    l_cls: torch.Tensor
    l_box: torch.Tensor
    l_ins: torch.Tensor
    l_img: torch.Tensor
    l_det: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in ("l_cls", "l_box", "l_ins", "l_img", "l_det")}


# ----------------------------------------------------------------------------
# Networks
# ----------------------------------------------------------------------------

class ToyBackbone(nn.Module):
    """Small stride-8 convolutional backbone whose last layer widens to 2048 channels."""

    stride = 8

    def __init__(self, out_channels: int = BACKBONE_CHANNELS):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(128, 128, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.expand = nn.Conv2d(128, out_channels, 1)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.expand(self.body(x)))


class BoxHead(nn.Module):
    def __init__(self, num_anchors: int, in_channels: int = BACKBONE_CHANNELS, width: int = 256):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(in_channels, width, 3, padding=1)
        self.cls = nn.Conv2d(width, num_anchors * 2, 1)
        self.box = nn.Conv2d(width, num_anchors * BOX_DELTAS, 1)
        nn.init.normal_(self.box.weight, std=0.001)
        nn.init.zeros_(self.box.bias)

    def forward(self, feats: torch.Tensor) -> BoxHeadOutput:
        B, _, H, W = feats.shape
        x = F.relu(self.conv(feats))
        P_cls = self.cls(x).permute(0, 2, 3, 1).reshape(B, H * W * self.num_anchors, 2)
        P_box = self.box(x).permute(0, 2, 3, 1).reshape(B, H * W * self.num_anchors, BOX_DELTAS)
        return BoxHeadOutput(P_cls=P_cls, P_box=P_box)


class GlobalContextParsing(nn.Module):
    """GAP over the backbone map gives f_c; one linear layer gives the frame-level action logits."""

    def __init__(self, num_actions: int, in_channels: int = BACKBONE_CHANNELS):
        super().__init__()
        self.classifier = nn.Linear(in_channels, num_actions)

    def forward(self, feats: torch.Tensor) -> FrameActionOutput:
        f_c = feats.mean(dim=(-2, -1))
        return FrameActionOutput(f_c=f_c, C_img=self.classifier(f_c))


class ActionParsingRCNN(nn.Module):
    """Four 256-channel convolutions over pooled regions, spatially pooled into f_ia, then a C-way linear layer."""

    def __init__(self, num_actions: int, in_channels: int = BACKBONE_CHANNELS):
        super().__init__()
        layers = []
        channels = in_channels
        for _ in range(4):
            layers += [nn.Conv2d(channels, INSTANCE_FEATURE_DIM, 3, padding=1), nn.ReLU(inplace=True)]
            channels = INSTANCE_FEATURE_DIM
        self.convs = nn.Sequential(*layers)
        self.classifier = nn.Linear(INSTANCE_FEATURE_DIM, num_actions)

    def forward(self, roi_features: torch.Tensor) -> InstanceActionOutput:
        f_ia = self.convs(roi_features).mean(dim=(-2, -1))
        return InstanceActionOutput(f_ia=f_ia, C_ins=self.classifier(f_ia))


def check_backbone(backbone: nn.Module, probe_size: Tuple[int, int] = (64, 64)) -> int:
    """Runs a probe image through a plugged backbone; the map must carry 2048 channels."""
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        probe = torch.zeros(1, 3, *probe_size)
        out = backbone(probe)
    backbone.train(was_training)
    if out.dim() != 4 or out.shape[1] != BACKBONE_CHANNELS:
        raise ConfigurationError(
            f"Detector backbone must output {BACKBONE_CHANNELS} channels, got shape {tuple(out.shape)}")
    stride = getattr(backbone, "stride", None)
    if not stride:
        raise ConfigurationError("Detector backbone must declare its output stride")
    return int(stride)


# ----------------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------------

def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.sum() * 0.0


def detection_loss(P_cls: torch.Tensor, cls_targets: torch.Tensor,
                   P_box: torch.Tensor, box_targets: torch.Tensor,
                   C_ins: torch.Tensor, ins_targets: torch.Tensor,
                   C_img: torch.Tensor, img_targets: torch.Tensor) -> DetectionLossBreakdown:
    """
    Unweighted four-term detector objective.

    cls_targets holds 1 (person), 0 (background) or -1 (ignored) per anchor.
    l_box is SmoothL1 on the person-class slice of P_box over positive anchors;
    l_ins is cross-entropy over positive regions. Terms with no contributing
    samples are exactly zero (and keep the graph).
    """
    valid = cls_targets >= 0
    l_cls = F.cross_entropy(P_cls[valid], cls_targets[valid]) if valid.any() else _zero(P_cls)

    positive = cls_targets == PERSON
    if positive.any():
        person_deltas = P_box[positive].view(-1, 2, 4)[:, PERSON]
        l_box = F.smooth_l1_loss(person_deltas, box_targets[positive], beta=1.0)
    else:
        l_box = _zero(P_box)

    l_ins = F.cross_entropy(C_ins, ins_targets) if C_ins.shape[0] > 0 else _zero(C_ins)
    l_img = F.cross_entropy(C_img, img_targets)
    l_det = l_cls + l_box + l_ins + l_img
    return DetectionLossBreakdown(l_cls=l_cls, l_box=l_box, l_ins=l_ins, l_img=l_img, l_det=l_det)


def assign_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, pos_iou: float, neg_iou: float
                   ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    IoU >= pos_iou -> 1, < neg_iou -> 0, otherwise -1 (ignored). Each ground-truth
    box additionally claims its best anchor(s). Returns (labels, matched_gt, ious).
    """
    n = anchors.shape[0]
    if gt_boxes.numel() == 0:
        return torch.zeros(n, dtype=torch.long), torch.zeros(n, dtype=torch.long), torch.zeros(n)
    ious = box_iou(anchors, gt_boxes)
    best_iou, matched = ious.max(dim=1)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    gt_best = ious.max(dim=0).values
    for g in range(gt_boxes.shape[0]):
        if gt_best[g] <= 0:
            continue
        claim = ious[:, g] == gt_best[g]
        labels[claim] = 1
        matched[claim] = g
    return labels, matched, best_iou


# ----------------------------------------------------------------------------
# Detector
# ----------------------------------------------------------------------------

def nms_boxes(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float, score_floor: float,
              max_detections: int) -> List[int]:
    """Score floor, then NMS; survivors ordered by descending score (area, then index on ties)."""
    keep = torch.nonzero(scores >= score_floor).flatten()
    widths = boxes[keep, 2] - boxes[keep, 0]
    heights = boxes[keep, 3] - boxes[keep, 1]
    keep = keep[(widths > 0) & (heights > 0)]
    if keep.numel() == 0:
        return []
    survivors = keep[nms(boxes[keep], scores[keep], iou_threshold)]
    ordered = score_order(scores[survivors].tolist(), boxes[survivors].tolist())
    return [int(survivors[i]) for i in ordered][:max_detections]


class PersonDetector(nn.Module):
    def __init__(self, settings: DetectorSettings, backbone: Optional[nn.Module] = None):
        super().__init__()
        self.settings = settings
        self.backbone = backbone if backbone is not None else ToyBackbone()
        self.stride = check_backbone(self.backbone)
        self.box_head = BoxHead(settings.num_anchors)
        self.gcp = GlobalContextParsing(settings.num_actions)
        self.ap_rcnn = ActionParsingRCNN(settings.num_actions)
        self.register_buffer("mean", torch.tensor(settings.image_mean).view(3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(settings.image_std).view(3, 1, 1), persistent=False)
        self._anchor_cache: Dict[Tuple[int, int], torch.Tensor] = {}

    def register_backbone(self, backbone: nn.Module):
        self.stride = check_backbone(backbone)
        self.backbone = backbone
        self._anchor_cache.clear()

    def preprocess(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        """uint8 H x W x 3 frames -> normalized (B, 3, H, W) tensor."""
        batch = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
        return (batch - self.mean) / self.std

    def anchors(self, feat_h: int, feat_w: int) -> torch.Tensor:
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = make_anchors(feat_h, feat_w, self.stride,
                                                   self.settings.anchor_sizes, self.settings.anchor_ratios)
        return self._anchor_cache[key]

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def gcp_forward(self, feats: torch.Tensor) -> FrameActionOutput:
        return self.gcp(feats)

    def ap_rcnn_forward(self, roi_features: torch.Tensor) -> InstanceActionOutput:
        return self.ap_rcnn(roi_features)

    def pool_regions(self, feats: torch.Tensor, boxes_per_image: List[torch.Tensor]) -> torch.Tensor:
        return roi_align(feats, boxes_per_image, output_size=ROI_SIZE, spatial_scale=1.0 / self.stride,
                         sampling_ratio=2, aligned=True)

    def compute_losses(self, images: torch.Tensor, gt_boxes: List[torch.Tensor],
                       actions: torch.Tensor) -> DetectionLossBreakdown:
        """images: normalized (B,3,H,W); gt_boxes: per-image (G,4) pixel boxes; actions: (B,) frame actions."""
        feats = self.backbone_forward(images)
        head = self.box_head(feats)
        frame = self.gcp_forward(feats)
        anchors = self.anchors(feats.shape[2], feats.shape[3])

        cls_targets, box_targets, rois, roi_actions = [], [], [], []
        for b, gts in enumerate(gt_boxes):
            labels, matched, ious = assign_anchors(anchors, gts, self.settings.pos_iou, self.settings.neg_iou)
            deltas = torch.zeros(anchors.shape[0], 4)
            positive = labels == PERSON
            if positive.any():
                deltas[positive] = encode_deltas(anchors[positive], gts[matched[positive]])
                best = torch.argsort(ious[positive], descending=True, stable=True)[:MAX_TRAIN_ROIS]
                regions = torch.cat([gts, anchors[positive][best]], dim=0)
            else:
                regions = gts.reshape(-1, 4)
            cls_targets.append(labels)
            box_targets.append(deltas)
            rois.append(regions.float())
            roi_actions.append(torch.full((regions.shape[0],), int(actions[b]), dtype=torch.long))

        roi_feats = self.pool_regions(feats, rois)
        instance = self.ap_rcnn_forward(roi_feats)
        return detection_loss(
            head.P_cls.reshape(-1, 2), torch.cat(cls_targets),
            head.P_box.reshape(-1, BOX_DELTAS), torch.cat(box_targets),
            instance.C_ins, torch.cat(roi_actions),
            frame.C_img, actions.long(),
        )

    @torch.no_grad()
    def detect(self, images: Sequence[np.ndarray]) -> List[FrameDetections]:
        """Boxes clipped to the image, score floor + NMS, instance heads on the survivors."""
        batch = self.preprocess(images)
        height, width = batch.shape[2], batch.shape[3]
        feats = self.backbone_forward(batch)
        head = self.box_head(feats)
        frame = self.gcp_forward(feats)
        anchors = self.anchors(feats.shape[2], feats.shape[3])

        results = []
        for b in range(batch.shape[0]):
            scores = F.softmax(head.P_cls[b], dim=-1)[:, PERSON]
            person_deltas = head.P_box[b].view(-1, 2, 4)[:, PERSON]
            boxes = clip_boxes(decode_deltas(anchors, person_deltas), width, height)
            keep = nms_boxes(boxes, scores, self.settings.nms_iou, self.settings.score_floor,
                             self.settings.max_detections)
            kept_boxes = boxes[keep] if keep else torch.zeros(0, 4)
            if keep:
                instance = self.ap_rcnn_forward(self.pool_regions(feats[b:b + 1], [kept_boxes]))
            else:
                instance = InstanceActionOutput(f_ia=torch.zeros(0, INSTANCE_FEATURE_DIM),
                                                C_ins=torch.zeros(0, self.settings.num_actions))
            scored = [ScoredBox(box=tuple(float(v) for v in kept_boxes[i].tolist()),
                                score=min(1.0, max(0.0, float(scores[k]))))
                      for i, k in enumerate(keep)]
            results.append(FrameDetections(
                boxes=scored,
                instance=instance,
                frame=FrameActionOutput(f_c=frame.f_c[b], C_img=frame.C_img[b]),
            ))
        return results

    def detect_frame(self, image: np.ndarray) -> FrameDetections:
        return self.detect([image])[0]


def select_top_boxes(detections: FrameDetections, P: int) -> FrameDetections:
    """The P best boxes (score desc, larger area, lower index) with their instance outputs."""
    if P < 1:
        raise ArgumentError(f"P must be >= 1, got {P}")
    order = score_order([b.score for b in detections.boxes], [b.box for b in detections.boxes])[:P]
    index = torch.tensor(order, dtype=torch.long)
    return FrameDetections(
        boxes=[detections.boxes[i] for i in order],
        instance=InstanceActionOutput(f_ia=detections.instance.f_ia[index],
                                      C_ins=detections.instance.C_ins[index]),
        frame=detections.frame,
    )
