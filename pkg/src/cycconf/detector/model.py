"""A minimal two-stage detector with an instance encoder and image-level SSL heads.

backbone (stride 8) -> single-anchor proposal head -> ROI Align -> box head,
plus the instance encoder that feeds the cycle losses and small rotation /
jigsaw classifiers that read the final backbone map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms

from ..cycmatch import ContractError
from . import boxes as box_ops
from .roi import roi_align


@dataclass
class DetectorConfig:
    image_size: int = 128
    in_channels: int = 3
    num_classes: int = 3
    backbone_channels: tuple = (16, 32, 32, 32)
    anchor_size: float = 24.0
    max_proposals: int = 64
    roi_train_proposals: int = 32
    roi_size: int = 7
    sampling_ratio: int = 1
    head_dim: int = 128
    encoder_channels: int = 32
    embed_dim: int = 128
    ssl_pool: int = 4

    @property
    def stride(self) -> int:
        return 8

    def to_dict(self):
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class ProposalSet:
    boxes: torch.Tensor
    scores: torch.Tensor
    frame_id: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.boxes.shape[0])


def select_proposals(proposals: ProposalSet, threshold: float, cap: int | None = None) -> ProposalSet:
    """Keep proposals with objectness >= ``threshold``, preserving order, at most ``cap``."""
    keep = torch.nonzero(proposals.scores >= threshold).flatten()
    if cap is not None:
        keep = keep[:cap]
    return ProposalSet(proposals.boxes[keep], proposals.scores[keep], proposals.frame_id)


class ToyDetector(nn.Module):
    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        cfg = config or DetectorConfig()
        self.config = cfg
        c1, c2, c3, c4 = cfg.backbone_channels
        self.backbone = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c3, c4, 3, stride=1, padding=1), nn.ReLU(),
        )
        self.rpn_conv = nn.Conv2d(c4, c4, 3, padding=1)
        self.rpn_objectness = nn.Conv2d(c4, 1, 1)
        self.rpn_deltas = nn.Conv2d(c4, 4, 1)

        roi_dim = c4 * cfg.roi_size * cfg.roi_size
        self.box_fc = nn.Sequential(
            nn.Linear(roi_dim, cfg.head_dim), nn.ReLU(),
            nn.Linear(cfg.head_dim, cfg.head_dim), nn.ReLU(),
        )
        self.box_cls = nn.Linear(cfg.head_dim, cfg.num_classes + 1)
        self.box_deltas = nn.Linear(cfg.head_dim, 4)

        self.encoder = nn.Sequential(
            nn.Conv2d(c4, cfg.encoder_channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(cfg.encoder_channels, cfg.embed_dim, 3, padding=1),
        )

        ssl_dim = c4 * cfg.ssl_pool * cfg.ssl_pool
        self.rotation_head = nn.Linear(ssl_dim, 4)
        self.jigsaw_head = nn.Linear(ssl_dim, 24)

        nn.init.normal_(self.rpn_objectness.weight, std=0.01)
        nn.init.zeros_(self.rpn_objectness.bias)
        nn.init.normal_(self.rpn_deltas.weight, std=0.01)
        nn.init.zeros_(self.rpn_deltas.bias)
        nn.init.normal_(self.box_cls.weight, std=0.01)
        nn.init.zeros_(self.box_cls.bias)
        nn.init.normal_(self.box_deltas.weight, std=0.001)
        nn.init.zeros_(self.box_deltas.bias)

    # ------------------------------------------------------------------ backbone / rpn

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise ContractError(
                f"expected (B, {self.config.in_channels}, H, W) images, got {tuple(images.shape)}")
        return self.backbone(images)

    def anchors(self, feat_h, feat_w, dtype=torch.float32):
        return box_ops.grid_anchors(feat_h, feat_w, self.config.stride, self.config.anchor_size, dtype)

    def rpn_forward(self, feats):
        h = F.relu(self.rpn_conv(feats))
        B = feats.shape[0]
        logits = self.rpn_objectness(h).reshape(B, -1)
        deltas = self.rpn_deltas(h).permute(0, 2, 3, 1).reshape(B, -1, 4)
        return logits, deltas

    def propose(self, feats, image_hw, rpn_out=None, frame_ids=None):
        """Decode, clip, score and rank anchors; one detached ProposalSet per image."""
        logits, deltas = rpn_out if rpn_out is not None else self.rpn_forward(feats)
        anchors = self.anchors(feats.shape[2], feats.shape[3], feats.dtype)
        H, W = image_hw
        out = []
        with torch.no_grad():
            for b in range(feats.shape[0]):
                boxes = box_ops.clip(box_ops.decode(anchors, deltas[b]), H, W)
                scores = torch.sigmoid(logits[b])
                ok = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
                boxes, scores = boxes[ok], scores[ok]
                order = torch.sort(scores, descending=True, stable=True).indices[: self.config.max_proposals]
                fid = frame_ids[b] if frame_ids is not None else b
                out.append(ProposalSet(boxes[order].detach(), scores[order].detach(), fid))
        return out

    # ------------------------------------------------------------------ roi heads

    def roi_features(self, feats, boxes_per_image):
        return roi_align(feats, boxes_per_image, self.config.roi_size,
                         1.0 / self.config.stride, self.config.sampling_ratio)

    def box_head(self, roi_feats):
        h = self.box_fc(roi_feats.flatten(1))
        return self.box_cls(h), self.box_deltas(h)

    def instance_encoder(self, roi_feats):
        """``(R, C, 7, 7)`` ROI features -> ``(R, embed_dim)`` embeddings."""
        cfg = self.config
        expected = (self.backbone_channels_out, cfg.roi_size, cfg.roi_size)
        if roi_feats.ndim != 4 or tuple(roi_feats.shape[1:]) != expected:
            raise ContractError(f"expected (R, {expected}) ROI features, got {tuple(roi_feats.shape)}")
        return self.encoder(roi_feats).mean(dim=(2, 3))

    @property
    def backbone_channels_out(self):
        return self.config.backbone_channels[-1]

    def _ssl_features(self, feats):
        p = self.config.ssl_pool
        return F.adaptive_avg_pool2d(feats, (p, p)).flatten(1)

    def rotation_logits(self, feats):
        return self.rotation_head(self._ssl_features(feats))

    def jigsaw_logits(self, feats):
        return self.jigsaw_head(self._ssl_features(feats))

    # ------------------------------------------------------------------ inference

    @torch.no_grad()
    def detect(self, images, score_thresh=0.05, nms_iou=0.5, max_det=100):
        """Per-image dicts of ``boxes``, ``scores``, ``labels`` (0-based classes)."""
        feats = self.backbone_forward(images)
        H, W = images.shape[2:]
        proposals = self.propose(feats, (H, W))
        rois = [p.boxes for p in proposals]
        results = []
        if sum(len(r) for r in rois) == 0:
            empty = {"boxes": images.new_zeros((0, 4)), "scores": images.new_zeros(0),
                     "labels": torch.zeros(0, dtype=torch.long)}
            return [dict(empty) for _ in proposals]
        logits, deltas = self.box_head(self.roi_features(feats, rois))
        probs = F.softmax(logits, dim=1)
        start = 0
        K = self.config.num_classes
        for r in rois:
            n = r.shape[0]
            p = probs[start:start + n, 1:]
            boxes = box_ops.clip(box_ops.decode(r, deltas[start:start + n]), H, W)
            start += n
            boxes = boxes[:, None, :].expand(n, K, 4).reshape(-1, 4)
            scores = p.reshape(-1)
            labels = torch.arange(K).repeat(n)
            keep = (scores >= score_thresh) & ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
            boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
            keep = batched_nms(boxes, scores, labels, nms_iou)[:max_det]
            results.append({"boxes": boxes[keep], "scores": scores[keep], "labels": labels[keep]})
        return results
