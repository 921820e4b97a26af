"""ROI Align by explicit bilinear gathers.

Sample points follow the half-pixel ("aligned") convention: a box edge at
image coordinate ``x`` lands at feature coordinate ``x * scale - 0.5`` where
integer feature coordinates are cell centres. Each output bin averages a
``sampling_ratio x sampling_ratio`` lattice of bilinear samples. Coordinates
are clamped to ``[0, size - 1]`` before interpolation.
"""

import torch

from ..cycmatch import ContractError


def _sample_coords(lo, hi, scale, out_size, ratio):
    # (R, out_size * ratio) feature-space coordinates along one axis
    start = lo * scale - 0.5
    bin_size = (hi - lo) * scale / out_size
    steps = (torch.arange(out_size * ratio, dtype=lo.dtype, device=lo.device) + 0.5) / ratio
    return start[:, None] + steps[None, :] * bin_size[:, None]


def _corners(coord, size):
    c = coord.clamp(0, size - 1)
    lo = c.floor()
    frac = c - lo
    lo = lo.long()
    hi = (lo + 1).clamp(max=size - 1)
    return lo, hi, frac


def roi_align(features, boxes_per_image, output_size=7, spatial_scale=1.0 / 8, sampling_ratio=1):
    """Pool a fixed-size ``C x output_size x output_size`` tensor for every box.

    ``features`` is ``(B, C, H, W)``; ``boxes_per_image`` a list of ``B``
    tensors of shape ``(R_b, 4)`` in image pixels. Returns ``(sum R_b, C, S, S)``.
    """
    B, C, H, W = features.shape
    if len(boxes_per_image) != B:
        raise ContractError(f"{len(boxes_per_image)} box lists for a batch of {B}")
    counts = [int(b.shape[0]) for b in boxes_per_image]
    if sum(counts) == 0:
        return features.new_zeros((0, C, output_size, output_size))
    boxes = torch.cat([b.to(features.dtype) for b in boxes_per_image], dim=0).detach()
    if ((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any():
        raise ContractError("degenerate box passed to roi_align")
    batch_idx = torch.repeat_interleave(torch.arange(B), torch.tensor(counts))
    n = output_size * sampling_ratio
    xs = _sample_coords(boxes[:, 0], boxes[:, 2], spatial_scale, output_size, sampling_ratio)
    ys = _sample_coords(boxes[:, 1], boxes[:, 3], spatial_scale, output_size, sampling_ratio)
    x0, x1, fx = _corners(xs, W)  # (R, n)
    y0, y1, fy = _corners(ys, H)

    base = (batch_idx * H * W)[:, None, None]
    flat = features.permute(0, 2, 3, 1).reshape(B * H * W, C)
    ys_, xs_ = torch.stack([y0, y0, y1, y1]), torch.stack([x0, x1, x0, x1])  # (4, R, n)
    idx = base[None] + ys_[:, :, :, None] * W + xs_[:, :, None, :]  # (4, R, n, n)
    wy = torch.stack([1 - fy, 1 - fy, fy, fy])[:, :, :, None]
    wx = torch.stack([1 - fx, fx, 1 - fx, fx])[:, :, None, :]
    weights = (wy * wx).reshape(4, -1, 1)
    out = (flat[idx.reshape(4, -1)] * weights).sum(dim=0).reshape(-1, n, n, C)
    R = boxes.shape[0]
    if sampling_ratio > 1:
        out = out.reshape(R, output_size, sampling_ratio, output_size, sampling_ratio, C).mean(dim=(2, 4))
    return out.permute(0, 3, 1, 2).contiguous()
