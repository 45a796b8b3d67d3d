import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.detector import (
    BACKBONE_CHANNELS,
    INSTANCE_FEATURE_DIM,
    DetectorSettings,
    FrameActionOutput,
    FrameDetections,
    GlobalContextParsing,
    InstanceActionOutput,
    PersonDetector,
    ScoredBox,
    ToyBackbone,
    assign_anchors,
    check_backbone,
    detection_loss,
    nms_boxes,
    select_top_boxes,
)
from src.errors import ArgumentError, ConfigurationError
from src.synth import render_blank
from src.tools.boxes import decode_deltas, encode_deltas, iou, make_anchors, pad_box, score_order


def test_iou_oracle():
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (2, 0, 4, 2)) == 0.0
    assert iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0


def test_delta_encoding_inverts():
    anchors = torch.tensor([[0.0, 0.0, 10.0, 20.0], [5.0, 5.0, 15.0, 15.0]])
    targets = torch.tensor([[2.0, 1.0, 14.0, 17.0], [4.0, 6.0, 20.0, 12.0]])
    assert torch.allclose(decode_deltas(anchors, encode_deltas(anchors, targets)), targets, atol=1e-5)


def test_anchor_layout():
    anchors = make_anchors(2, 3, stride=8, sizes=(16.0,), ratios=(1.0, 2.0))
    assert anchors.shape == (2 * 3 * 2, 4)
    first = anchors[0]
    assert ((first[0] + first[2]) / 2).item() == pytest.approx(4.0)
    assert (first[2] - first[0]).item() == pytest.approx(16.0)


def test_score_order_ties():
    boxes = [(0, 0, 1, 1), (0, 0, 2, 2), (0, 0, 2, 2), (0, 0, 1, 1)]
    assert score_order([0.5, 0.5, 0.5, 0.9], boxes) == [3, 1, 2, 0]


def test_pad_box_clips():
    assert pad_box((10, 10, 30, 50), 1.1, 100, 100) == pytest.approx((9.0, 8.0, 31.0, 52.0))
    assert pad_box((0, 0, 20, 20), 2.0, 25, 25) == (0.0, 0.0, 25.0, 25.0)


def test_ground_truth_claims_its_best_anchor():
    anchors = torch.tensor([[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0]])
    gt = torch.tensor([[0.0, 0.0, 30.0, 30.0]])
    labels, matched, ious = assign_anchors(anchors, gt, pos_iou=0.5, neg_iou=0.4)
    assert ious[0].item() < 0.4
    assert labels.tolist() == [1, 0]
    assert matched[0].item() == 0


def test_no_ground_truth_is_all_background():
    labels, _, _ = assign_anchors(torch.zeros(3, 4) + torch.tensor([0.0, 0.0, 4.0, 4.0]), torch.zeros(0, 4), 0.5, 0.4)
    assert labels.tolist() == [0, 0, 0]


def test_detection_loss_sums_terms_and_zeroes_empty_ones():
    P_cls = torch.randn(5, 2, requires_grad=True)
    P_box = torch.randn(5, 8, requires_grad=True)
    C_ins = torch.randn(0, 3, requires_grad=True)
    C_img = torch.randn(2, 3, requires_grad=True)
    losses = detection_loss(P_cls, torch.tensor([0, 0, -1, 0, 0]), P_box, torch.zeros(5, 4),
                            C_ins, torch.zeros(0, dtype=torch.long), C_img, torch.tensor([0, 2]))
    assert losses.l_box.item() == 0.0
    assert losses.l_ins.item() == 0.0
    assert losses.l_det.item() == pytest.approx(losses.l_cls.item() + losses.l_img.item(), rel=1e-6)
    losses.l_det.backward()
    assert P_cls.grad is not None and P_box.grad is not None


def test_check_backbone_rejects_wrong_width():
    class Narrow(nn.Module):
        stride = 8

        def forward(self, x):
            return torch.zeros(x.shape[0], 16, 8, 8)

    with pytest.raises(ConfigurationError):
        check_backbone(Narrow())


def _detector(**overrides) -> PersonDetector:
    torch.manual_seed(0)
    settings = dict(num_actions=3, score_floor=0.0, max_detections=5)
    settings.update(overrides)
    return PersonDetector(DetectorSettings(**settings)).eval()


def test_detect_emits_sorted_scored_boxes():
    detector = _detector()
    image = render_blank(96, 96, seed=1)
    detections = detector.detect_frame(image)
    scores = [b.score for b in detections.boxes]
    assert 1 <= len(scores) <= 5
    assert scores == sorted(scores, reverse=True)
    for scored in detections.boxes:
        x1, y1, x2, y2 = scored.box
        assert 0 <= x1 < x2 <= 96 and 0 <= y1 < y2 <= 96
    assert detections.instance.f_ia.shape == (len(scores), INSTANCE_FEATURE_DIM)
    assert detections.instance.C_ins.shape == (len(scores), 3)
    assert detections.frame.f_c.shape == (BACKBONE_CHANNELS,)
    assert detections.frame.C_img.shape == (3,)


def test_score_floor_can_suppress_everything():
    detections = _detector(score_floor=1.0).detect_frame(render_blank(96, 96, seed=1))
    assert detections.boxes == []
    assert detections.instance.f_ia.shape == (0, INSTANCE_FEATURE_DIM)


def test_select_top_boxes_keeps_instance_rows_aligned():
    detections = _detector().detect_frame(render_blank(96, 96, seed=2))
    top = select_top_boxes(detections, 2)
    assert len(top.boxes) == min(2, len(detections.boxes))
    assert torch.equal(top.instance.f_ia, detections.instance.f_ia[:len(top.boxes)])
    with pytest.raises(ArgumentError):
        select_top_boxes(detections, 0)


def test_compute_losses_backpropagates():
    detector = _detector()
    detector.train()
    images = detector.preprocess([render_blank(96, 96, seed=s) for s in range(2)])
    gt_boxes = [torch.tensor([[20.0, 10.0, 60.0, 80.0]]), torch.zeros(0, 4)]
    losses = detector.compute_losses(images, gt_boxes, torch.tensor([0, 2]))
    values = losses.as_floats()
    assert np.isfinite(list(values.values())).all()
    assert values["l_det"] == pytest.approx(values["l_cls"] + values["l_box"] + values["l_ins"] + values["l_img"],
                                            rel=1e-5)
    losses.l_det.backward()
    assert detector.gcp.classifier.weight.grad is not None
    assert detector.ap_rcnn.classifier.weight.grad is not None


def _naive_cross_entropy(rows, targets):
    if not rows:
        return 0.0
    total = 0.0
    for row, target in zip(rows, targets):
        m = max(row)
        total += m + math.log(sum(math.exp(v - m) for v in row)) - row[target]
    return total / len(rows)


def _naive_smooth_l1(values):
    if not values:
        return 0.0
    return sum(0.5 * v * v if abs(v) < 1.0 else abs(v) - 0.5 for v in values) / len(values)


def _random_loss_inputs(g):
    A = int(torch.randint(1, 13, (1,), generator=g))
    N = int(torch.randint(0, 5, (1,), generator=g))
    B = int(torch.randint(1, 4, (1,), generator=g))
    C = 3
    return dict(
        P_cls=torch.randn(A, 2, generator=g, dtype=torch.float64),
        cls_targets=torch.randint(-1, 2, (A,), generator=g),
        P_box=2 * torch.randn(A, 8, generator=g, dtype=torch.float64),
        box_targets=torch.randn(A, 4, generator=g, dtype=torch.float64),
        C_ins=torch.randn(N, C, generator=g, dtype=torch.float64),
        ins_targets=torch.randint(0, C, (N,), generator=g),
        C_img=torch.randn(B, C, generator=g, dtype=torch.float64),
        img_targets=torch.randint(0, C, (B,), generator=g),
    )


def test_detection_loss_matches_naive_recomputation():
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        inputs = _random_loss_inputs(g)
        losses = detection_loss(**inputs)
        labels = inputs["cls_targets"].tolist()
        valid = [i for i, t in enumerate(labels) if t >= 0]
        positive = [i for i, t in enumerate(labels) if t == 1]
        l_cls = _naive_cross_entropy([inputs["P_cls"][i].tolist() for i in valid], [labels[i] for i in valid])
        residuals = [inputs["P_box"][i, 4 + j].item() - inputs["box_targets"][i, j].item()
                     for i in positive for j in range(4)]
        l_box = _naive_smooth_l1(residuals)
        l_ins = _naive_cross_entropy(inputs["C_ins"].tolist(), inputs["ins_targets"].tolist())
        l_img = _naive_cross_entropy(inputs["C_img"].tolist(), inputs["img_targets"].tolist())
        assert losses.l_cls.item() == pytest.approx(l_cls, abs=1e-9)
        assert losses.l_box.item() == pytest.approx(l_box, abs=1e-9)
        assert losses.l_ins.item() == pytest.approx(l_ins, abs=1e-9)
        assert losses.l_img.item() == pytest.approx(l_img, abs=1e-9)
        assert losses.l_det.item() == pytest.approx(l_cls + l_box + l_ins + l_img, abs=1e-9)


def test_detection_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(1)
    inputs = _random_loss_inputs(g)
    inputs["cls_targets"] = torch.tensor([1, 0, -1, 1, 0, 0])
    inputs["P_cls"] = torch.randn(6, 2, generator=g, dtype=torch.float64)
    inputs["P_box"] = 2 * torch.randn(6, 8, generator=g, dtype=torch.float64)
    inputs["box_targets"] = torch.randn(6, 4, generator=g, dtype=torch.float64)
    inputs["C_ins"] = torch.randn(3, 3, generator=g, dtype=torch.float64)
    inputs["ins_targets"] = torch.tensor([0, 2, 1])
    for term, name in (("l_cls", "P_cls"), ("l_box", "P_box"), ("l_ins", "C_ins"), ("l_img", "C_img")):
        x = inputs[name].clone().requires_grad_(True)

        def term_of(value, term=term, name=name):
            return getattr(detection_loss(**{**inputs, name: value}), term)

        assert torch.autograd.gradcheck(term_of, (x,), eps=1e-5, atol=1e-3, rtol=1e-3)


def test_global_context_gradients_and_spatial_order():
    torch.manual_seed(0)
    gcp = GlobalContextParsing(3).double()
    feats = torch.randn(1, BACKBONE_CHANNELS, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda f: gcp(f).C_img, (feats,), eps=1e-5, atol=1e-3, rtol=1e-3)

    feats = torch.randn(2, BACKBONE_CHANNELS, 3, 3, dtype=torch.float64)
    reference = gcp(feats)
    perm = torch.randperm(9)
    shuffled = gcp(feats.flatten(2)[:, :, perm].view(2, BACKBONE_CHANNELS, 3, 3))
    assert torch.allclose(shuffled.f_c, reference.f_c, atol=1e-12)
    assert torch.allclose(shuffled.C_img, reference.C_img, atol=1e-12)


def test_nms_drops_duplicate_boxes():
    boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0],
                          [5.0, 5.0, 5.0, 9.0]])
    scores = torch.tensor([0.8, 0.9, 0.7, 0.95])
    assert nms_boxes(boxes, scores, iou_threshold=0.5, score_floor=0.0, max_detections=10) == [1, 2]
    assert nms_boxes(boxes, scores, iou_threshold=0.5, score_floor=0.75, max_detections=10) == [1]
    assert nms_boxes(boxes, scores, iou_threshold=0.5, score_floor=0.0, max_detections=1) == [1]


def test_select_top_ten_of_fifteen_boxes():
    scores = [0.95, 0.9, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.55, 0.5, 0.4, 0.3, 0.2]
    boxes = [ScoredBox(box=(0.0, 0.0, 10.0, 10.0), score=s) for s in scores]
    # Ties at ranks 1/2 and 9/10: the later box is larger and goes first.
    boxes[2] = ScoredBox(box=(0.0, 0.0, 20.0, 20.0), score=0.9)
    boxes[10] = ScoredBox(box=(0.0, 0.0, 30.0, 10.0), score=0.55)
    f_ia = torch.arange(15, dtype=torch.float32).unsqueeze(1).expand(15, INSTANCE_FEATURE_DIM)
    detections = FrameDetections(
        boxes=boxes,
        instance=InstanceActionOutput(f_ia=f_ia, C_ins=torch.zeros(15, 3)),
        frame=FrameActionOutput(f_c=torch.zeros(BACKBONE_CHANNELS), C_img=torch.zeros(3)),
    )
    top = select_top_boxes(detections, 10)
    order = [0, 2, 1, 3, 4, 5, 6, 7, 8, 10]
    assert [b.score for b in top.boxes] == [scores[i] for i in order]
    assert top.instance.f_ia[:, 0].tolist() == [float(i) for i in order]
    assert select_top_boxes(detections, 10).boxes == top.boxes
    assert len(select_top_boxes(detections, 20).boxes) == 15


def test_register_backbone_swaps_stride_and_checks_width():
    class Coarse(nn.Module):
        stride = 16

        def __init__(self):
            super().__init__()
            self.inner = ToyBackbone()

        def forward(self, x):
            return F.max_pool2d(self.inner(x), 2)

    class Narrow(nn.Module):
        stride = 8

        def forward(self, x):
            return torch.zeros(x.shape[0], 16, 8, 8)

    detector = _detector()
    detector.detect_frame(render_blank(96, 96, seed=3))
    detector.register_backbone(Coarse().eval())
    assert detector.stride == 16
    detections = detector.detect_frame(render_blank(96, 96, seed=3))
    assert detections.frame.f_c.shape == (BACKBONE_CHANNELS,)
    with pytest.raises(ConfigurationError):
        detector.register_backbone(Narrow())
    assert detector.stride == 16
