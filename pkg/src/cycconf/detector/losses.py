"""Detection losses: proposal objectness/box terms and ROI classification/box terms."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import boxes as box_ops

RPN_POS_IOU = 0.5
RPN_NEG_IOU = 0.3
ROI_FG_IOU = 0.5
SMOOTH_L1_BETA = 1.0 / 9


@dataclass
class DetectionLoss:
    rpn_objectness: torch.Tensor
    rpn_box: torch.Tensor
    roi_cls: torch.Tensor
    roi_box: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.rpn_objectness + self.rpn_box + self.roi_cls + self.roi_box

    def as_dict(self):
        d = {f: float(getattr(self, f).detach()) for f in ("rpn_objectness", "rpn_box", "roi_cls", "roi_box")}
        d["total"] = float(self.total.detach())
        return d

    @staticmethod
    def mean(losses):
        n = len(losses)
        return DetectionLoss(*(sum(getattr(l, f) for l in losses) / n
                               for f in ("rpn_objectness", "rpn_box", "roi_cls", "roi_box")))


def label_anchors(anchors, gt_boxes, pos_iou=RPN_POS_IOU, neg_iou=RPN_NEG_IOU):
    """Anchor labels (1 fg, 0 bg, -1 ignore) and index of the matched GT box.

    An anchor is foreground at IoU >= ``pos_iou`` or when it is (one of) the
    best anchors for some GT box; background below ``neg_iou``.
    """
    A = anchors.shape[0]
    if gt_boxes.shape[0] == 0:
        return torch.zeros(A, dtype=torch.long), torch.zeros(A, dtype=torch.long)
    iou = box_ops.box_iou(anchors, gt_boxes)
    best, idx = iou.max(dim=1)
    labels = torch.full((A,), -1, dtype=torch.long)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    best_per_gt = iou.max(dim=0).values
    low_quality = ((iou == best_per_gt[None, :]) & (best_per_gt[None, :] > 0)).any(dim=1)
    labels[low_quality] = 1
    return labels, idx


def label_rois(rois, gt_boxes, gt_labels, fg_iou=ROI_FG_IOU):
    """Class targets (0 = background, c + 1 = class c) and matched GT index per ROI."""
    R = rois.shape[0]
    if gt_boxes.shape[0] == 0:
        return torch.zeros(R, dtype=torch.long), torch.zeros(R, dtype=torch.long)
    iou = box_ops.box_iou(rois, gt_boxes)
    best, idx = iou.max(dim=1)
    cls = torch.where(best >= fg_iou, gt_labels[idx] + 1, torch.zeros_like(idx))
    return cls, idx


def _smooth_l1_sum(pred, target):
    return F.smooth_l1_loss(pred, target, beta=SMOOTH_L1_BETA, reduction="sum")


def rpn_losses(anchors, logits, deltas, gt_boxes):
    """Objectness BCE averaged over labelled anchors; box loss summed over positives / #positives."""
    labels, idx = label_anchors(anchors, gt_boxes)
    valid = labels >= 0
    obj = F.binary_cross_entropy_with_logits(logits[valid], labels[valid].to(logits.dtype))
    pos = labels == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        return obj, deltas.sum() * 0.0
    target = box_ops.encode(anchors[pos], gt_boxes[idx[pos]].to(anchors.dtype))
    return obj, _smooth_l1_sum(deltas[pos], target) / n_pos


def roi_losses(rois, cls_logits, deltas, gt_boxes, gt_labels):
    cls, idx = label_rois(rois, gt_boxes, gt_labels)
    cls_loss = F.cross_entropy(cls_logits, cls)
    fg = cls > 0
    n_fg = int(fg.sum())
    if n_fg == 0:
        return cls_loss, deltas.sum() * 0.0
    target = box_ops.encode(rois[fg], gt_boxes[idx[fg]].to(rois.dtype))
    return cls_loss, _smooth_l1_sum(deltas[fg], target) / n_fg


def detection_loss(predictions: dict, gt_boxes, gt_labels) -> DetectionLoss:
    """Loss for one image.

    ``predictions`` holds ``anchors (A,4)``, ``rpn_logits (A,)``,
    ``rpn_deltas (A,4)``, ``rois (R,4)``, ``roi_logits (R,K+1)`` and
    ``roi_deltas (R,4)``. Targets are matched inside.
    """
    obj, rbox = rpn_losses(predictions["anchors"], predictions["rpn_logits"],
                           predictions["rpn_deltas"], gt_boxes)
    if predictions["rois"].shape[0] == 0:
        zero = predictions["roi_logits"].sum() * 0.0
        return DetectionLoss(obj, rbox, zero, zero)
    cls, cbox = roi_losses(predictions["rois"], predictions["roi_logits"],
                           predictions["roi_deltas"], gt_boxes, gt_labels)
    return DetectionLoss(obj, rbox, cls, cbox)


def forward_detection(model, feats, image_hw, gt_boxes, gt_labels, rpn_out=None, proposals=None):
    """Run the heads on a batch of backbone features and return per-image losses.

    ROIs are the top ``roi_train_proposals`` detached proposals plus the GT
    boxes of each image.
    """
    logits, deltas = rpn_out if rpn_out is not None else model.rpn_forward(feats)
    if proposals is None:
        proposals = model.propose(feats, image_hw, (logits, deltas))
    anchors = model.anchors(feats.shape[2], feats.shape[3], feats.dtype)
    k = model.config.roi_train_proposals
    rois = [torch.cat([p.boxes[:k], g.to(feats.dtype)], dim=0) for p, g in zip(proposals, gt_boxes)]
    roi_logits, roi_deltas = model.box_head(model.roi_features(feats, rois))
    out = []
    start = 0
    for b, r in enumerate(rois):
        n = r.shape[0]
        pred = {
            "anchors": anchors, "rpn_logits": logits[b], "rpn_deltas": deltas[b], "rois": r,
            "roi_logits": roi_logits[start:start + n], "roi_deltas": roi_deltas[start:start + n],
        }
        start += n
        out.append(detection_loss(pred, gt_boxes[b], gt_labels[b]))
    return out, proposals
