"""Image-level pretext tasks: 4-way rotation and 2x2 jigsaw."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from .cycmatch import ContractError

ANGLES = (0, 90, 180, 270)
# lexicographic, so index 0 is the identity
PERMUTATIONS = tuple(itertools.permutations(range(4)))


@dataclass
class RotationSample:
    image: np.ndarray
    label: int


@dataclass
class JigsawSample:
    tiles: list
    label: int

    def assemble(self) -> np.ndarray:
        return assemble_tiles(self.tiles)


def _crop(image, crop_size, origin):
    h, w = image.shape[:2]
    if crop_size is None:
        crop_size = min(h, w)
    y0, x0 = origin
    if crop_size > h or crop_size > w or y0 < 0 or x0 < 0 or y0 + crop_size > h or x0 + crop_size > w:
        raise ContractError(f"crop {crop_size} at {origin} does not fit in image {h}x{w}")
    return image[y0:y0 + crop_size, x0:x0 + crop_size]


def random_origin(image_shape, crop_size, rng: np.random.Generator):
    h, w = image_shape[:2]
    if crop_size is None:
        crop_size = min(h, w)
    if crop_size > h or crop_size > w:
        raise ContractError(f"crop {crop_size} larger than image {h}x{w}")
    return int(rng.integers(0, h - crop_size + 1)), int(rng.integers(0, w - crop_size + 1))


def rotate_and_label(image, angle_index: int, crop_size: int | None = None, origin=(0, 0)) -> RotationSample:
    """Crop an ``H x W [x C]`` image and rotate it ``90 * angle_index`` degrees counterclockwise.

    ``crop_size=None`` takes the largest square anchored at ``origin``.
    """
    if angle_index not in range(4):
        raise ContractError(f"angle index must be in 0..3, got {angle_index}")
    crop = _crop(np.asarray(image), crop_size, origin)
    return RotationSample(np.ascontiguousarray(np.rot90(crop, k=angle_index, axes=(0, 1))), angle_index)


def split_tiles(image) -> list:
    h, w = image.shape[:2]
    if h % 2 or w % 2:
        raise ContractError(f"jigsaw crop must have even sides, got {h}x{w}")
    hh, hw = h // 2, w // 2
    return [image[:hh, :hw], image[:hh, hw:], image[hh:, :hw], image[hh:, hw:]]


def assemble_tiles(tiles) -> np.ndarray:
    top = np.concatenate([tiles[0], tiles[1]], axis=1)
    bottom = np.concatenate([tiles[2], tiles[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def inverse_permutation(perm_index: int) -> int:
    perm = PERMUTATIONS[perm_index]
    inv = tuple(int(i) for i in np.argsort(perm))
    return PERMUTATIONS.index(inv)


def jigsaw_shuffle(image, perm_index: int, crop_size: int | None = None, origin=(0, 0)) -> JigsawSample:
    """Cut a square crop into a 2x2 grid and reorder the tiles.

    Output slot ``k`` (reading order) receives input tile ``PERMUTATIONS[perm_index][k]``.
    """
    if perm_index not in range(len(PERMUTATIONS)):
        raise ContractError(f"permutation index must be in 0..23, got {perm_index}")
    crop = _crop(np.asarray(image), crop_size, origin)
    tiles = split_tiles(crop)
    perm = PERMUTATIONS[perm_index]
    return JigsawSample([tiles[p] for p in perm], perm_index)


def softmax_cross_entropy(logits, labels):
    """Mean stabilised cross-entropy and its gradient.

    ``logits`` is ``(K,)`` or ``(B, K)``; ``labels`` an int or ``(B,)`` ints.
    Returns ``(loss, grad)`` with ``grad`` shaped like ``logits``.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ContractError("one label per logit row required")
    if not np.isfinite(z).all():
        raise ContractError("logits must be finite")
    if ((y < 0) | (y >= z.shape[1])).any() or not np.issubdtype(y.dtype, np.integer):
        raise ContractError(f"labels must be integers in [0, {z.shape[1]})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float((lse - z[rows, y]).mean())
    grad = np.exp(z - lse[:, None])
    grad[rows, y] -= 1.0
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


def _checked_ce(logits, label, n_classes):
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] != n_classes:
        raise ContractError(f"expected {n_classes} logits, got {z.shape[-1]}")
    return softmax_cross_entropy(z, label)


def rotation_loss(logits, label):
    return _checked_ce(logits, label, 4)


def jigsaw_loss(logits, label):
    return _checked_ce(logits, label, len(PERMUTATIONS))


class _CEFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, loss, grad):
        ctx.save_for_backward(grad)
        return logits.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None


def torch_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy for a ``(B, K)`` logit tensor using the numpy kernel above."""
    loss, grad = softmax_cross_entropy(logits.detach().cpu().double().numpy(), np.asarray(labels, dtype=np.int64))
    return _CEFunction.apply(logits, loss, torch.from_numpy(grad).to(logits.dtype))
