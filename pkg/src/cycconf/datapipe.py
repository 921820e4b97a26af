"""Loading benchmark directories, attribute splits, and temporal frame-pair sampling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .synthvid import DomainConfig, FrameAnnotation, SequenceRecord

ATTRIBUTES = ("domain", "split", "time_of_day", "fog_alpha", "camera_shift_px", "brightness_scale", "noise_sigma")


class DatasetError(RuntimeError):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path}: {e}") from None


def _read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _seq_attribute(seq: SequenceRecord, attribute):
    if attribute == "domain":
        return seq.domain.name
    if attribute == "split":
        return seq.split
    return getattr(seq.domain, attribute)


@dataclass
class DatasetIndex:
    sequences: list
    root: Path | None = None
    manifest: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.sequences)

    @property
    def ids(self):
        return [s.sequence_id for s in self.sequences]

    def attribute_index(self, attribute) -> dict:
        if attribute not in ATTRIBUTES:
            raise DatasetError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTES}")
        out = {}
        for s in self.sequences:
            out.setdefault(_seq_attribute(s, attribute), []).append(s.sequence_id)
        return out

    def image(self, seq_idx, t) -> np.ndarray:
        key = (seq_idx, t)
        img = self._cache.get(key)
        if img is None:
            img = _read_image(self.sequences[seq_idx].frame_path(t))
            self._cache[key] = img
        return img

    def frames(self):
        """Yield ``(seq_idx, t)`` for every frame in order."""
        for i, s in enumerate(self.sequences):
            for t in range(len(s.frames)):
                yield i, t

    @property
    def n_frames(self):
        return sum(len(s.frames) for s in self.sequences)


def _validate_boxes(boxes, path, frame_index, size):
    for b in boxes:
        if len(b) != 4:
            raise DatasetError(f"{path}: frame {frame_index} has a box with {len(b)} coordinates")
        x1, y1, x2, y2 = b
        if not (x2 > x1 and y2 > y1):
            raise DatasetError(f"{path}: frame {frame_index} box {b} has x2 <= x1 or y2 <= y1")
        if size is not None and (x1 < 0 or y1 < 0 or x2 > size[1] or y2 > size[0]):
            raise DatasetError(f"{path}: frame {frame_index} box {b} lies outside the {size[1]}x{size[0]} frame")


def _load_sequence(seq_dir: Path, split_hint="") -> SequenceRecord:
    ann_path = seq_dir / "annotations.json"
    data = _read_json(ann_path)
    try:
        domain = DomainConfig(**data["domain"])
        frames = []
        size = None
        for f in data["frames"]:
            img_path = seq_dir / f["file"]
            if not img_path.is_file():
                raise DatasetError(f"{ann_path}: referenced frame file is missing: {img_path}")
            if size is None:
                with Image.open(img_path) as im:
                    size = (im.height, im.width)
            _validate_boxes(f["boxes"], ann_path, f["index"], size)
            if len(f["categories"]) != len(f["boxes"]):
                raise DatasetError(f"{ann_path}: frame {f['index']} has mismatched boxes/categories")
            frames.append(FrameAnnotation(
                int(f["index"]), f["file"], np.asarray(f["boxes"], dtype=np.float64).reshape(-1, 4),
                [int(c) for c in f["categories"]], [int(t) for t in f.get("track_ids", [])]))
        rec = SequenceRecord(data["sequence_id"], domain, int(data.get("seed", 0)), frames,
                             data.get("split", split_hint), seq_dir)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"{ann_path}: invalid annotation record ({e})") from None
    return rec


def load_dataset(directory) -> DatasetIndex:
    """Load and validate every sequence listed in ``<directory>/manifest.json``.

    Works on a benchmark root or on any ``<domain>/<split>`` directory.
    """
    root = Path(directory)
    manifest = _read_json(root / "manifest.json")
    if "sequences" not in manifest:
        raise DatasetError(f"{root / 'manifest.json'}: no 'sequences' entry")
    seqs = []
    for entry in manifest["sequences"]:
        seq_dir = root / entry["path"]
        if not seq_dir.is_dir():
            raise DatasetError(f"manifest references a missing sequence directory: {seq_dir}")
        seqs.append(_load_sequence(seq_dir, entry.get("split", "")))
    return DatasetIndex(seqs, root, manifest)


def split_by_attribute(index: DatasetIndex, attribute, value) -> DatasetIndex:
    if attribute not in ATTRIBUTES:
        raise DatasetError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTES}")
    keep = [s for s in index.sequences if _seq_attribute(s, attribute) == value]
    return DatasetIndex(keep, index.root, index.manifest)


@dataclass
class UnlabeledFrames:
    """Frame files of a split, enumerated without opening any annotation file."""

    paths: list
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.paths)

    def image(self, i):
        img = self._cache.get(i)
        if img is None:
            img = _read_image(self.paths[i])
            self._cache[i] = img
        return img


def load_unlabeled(directory) -> UnlabeledFrames:
    root = Path(directory)
    manifest = _read_json(root / "manifest.json")
    paths = []
    for entry in manifest.get("sequences", []):
        seq_dir = root / entry["path"]
        found = sorted(seq_dir.glob("frame_*.png"))
        if not found:
            raise DatasetError(f"no frames found in {seq_dir}")
        paths.extend(found)
    if not paths:
        raise DatasetError(f"no frames found under {root}")
    return UnlabeledFrames(paths)


@dataclass
class FramePair:
    sequence_id: str
    t0: int
    t1: int
    image0: np.ndarray
    image1: np.ndarray
    boxes0: np.ndarray
    boxes1: np.ndarray
    labels0: list
    labels1: list

    @property
    def gap(self):
        return self.t1 - self.t0


def valid_pair_starts(index: DatasetIndex, k: int):
    """``(seq_idx, n_valid_t0)`` for sequences long enough for gap ``k``."""
    return [(i, len(s.frames) - k) for i, s in enumerate(index.sequences) if len(s.frames) - k > 0]


def sample_frame_pair(index: DatasetIndex, rng: np.random.Generator, k: int = 1) -> FramePair:
    """Pick a sequence uniformly among those with at least ``k + 1`` frames, then ``t0`` uniformly."""
    if k < 1:
        raise DatasetError("pair gap must be a positive integer")
    valid = valid_pair_starts(index, k)
    if not valid:
        raise DatasetError(f"no sequence has at least {k + 1} frames")
    seq_idx, n_starts = valid[int(rng.integers(len(valid)))]
    t0 = int(rng.integers(n_starts))
    return make_pair(index, seq_idx, t0, t0 + k)


def make_pair(index: DatasetIndex, seq_idx, t0, t1) -> FramePair:
    s = index.sequences[seq_idx]
    a, b = s.frames[t0], s.frames[t1]
    return FramePair(s.sequence_id, t0, t1, index.image(seq_idx, t0), index.image(seq_idx, t1),
                     a.boxes, b.boxes, list(a.categories), list(b.categories))


def to_tensor(images) -> torch.Tensor:
    """Stack ``H x W x 3`` uint8 arrays into a float ``(B, 3, H, W)`` tensor in ``[0, 1]``."""
    arr = np.stack([np.asarray(i) for i in images]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def domain_summary(index: DatasetIndex) -> dict:
    return {s.sequence_id: asdict(s.domain) for s in index.sequences}
