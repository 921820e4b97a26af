"""Box geometry on ``(N, 4)`` tensors in ``x1, y1, x2, y2`` pixel coordinates."""

import math

import torch

# keeps exp() of width/height deltas bounded
_MAX_LOG_SCALE = math.log(1000.0 / 16)


def box_area(boxes):
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou(a, b):
    """IoU matrix of shape ``(len(a), len(b))``."""
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode(ref, target):
    """Regression deltas that move ``ref`` boxes onto ``target`` boxes."""
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack([(tx - rx) / rw, (ty - ry) / rh, torch.log(tw / rw), torch.log(th / rh)], dim=1)


def decode(ref, deltas):
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=_MAX_LOG_SCALE)
    dh = deltas[:, 3].clamp(max=_MAX_LOG_SCALE)
    cx = rx + dx * rw
    cy = ry + dy * rh
    w = rw * torch.exp(dw)
    h = rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip(boxes, height, width):
    return torch.stack([
        boxes[:, 0].clamp(0, width), boxes[:, 1].clamp(0, height),
        boxes[:, 2].clamp(0, width), boxes[:, 3].clamp(0, height),
    ], dim=1)


def grid_anchors(feat_h, feat_w, stride, size, dtype=torch.float32):
    """One square anchor of side ``size`` centred on every feature cell, row-major."""
    ys = (torch.arange(feat_h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    cx = cx.reshape(-1)
    cy = cy.reshape(-1)
    half = size / 2.0
    return torch.stack([cx - half, cy - half, cx + half, cy + half], dim=1)
