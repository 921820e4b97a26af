"""Deterministic "moving shapes" driving-style videos with domain attributes.

Objects travel in horizontal lanes. Every object in a lane shares the lane
velocity and reflects off the world edges as a group, and each object adds
its own bounded per-frame jitter, so objects never overlap. Categories are
tied to a dominant colour channel: circle red, square green, triangle blue,
on a neutral grey background.

Domain effects are applied after rendering, in order: brightness scale,
additive Gaussian noise, alpha blend toward mid-grey (fog). A camera shift
renders a wider world and crops a window offset by ``camera_shift_px``.
Scene geometry and sensor noise use separate streams, so the same seed gives
the same scene under every domain.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import Stream, derive_seed

CATEGORIES = ("circle", "square", "triangle")
SCHEMA_VERSION = 1
_SCENE_STREAM = 0
_NOISE_STREAM = 1
_SUPERSAMPLE = 4
_MIN_VISIBLE_PX = 4.0


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainConfig:
    name: str = "day"
    time_of_day: str = "day"
    fog_alpha: float = 0.0
    camera_shift_px: int = 0
    brightness_scale: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.time_of_day not in ("day", "night"):
            raise ValueError(f"time_of_day must be day or night, got {self.time_of_day!r}")
        if not 0.0 <= self.fog_alpha <= 1.0:
            raise ValueError("fog_alpha must be in [0, 1]")
        if not 0.0 <= self.brightness_scale <= 1.0:
            raise ValueError("brightness_scale must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.camera_shift_px < 0:
            raise ValueError("camera_shift_px must be >= 0")
        if self.time_of_day == "night" and self.brightness_scale > 0.5:
            raise ValueError("night domains must have brightness_scale <= 0.5")


DOMAINS = {
    "day": DomainConfig("day"),
    "night": DomainConfig("night", "night", brightness_scale=0.3, noise_sigma=0.02),
    "fog": DomainConfig("fog", fog_alpha=0.5),
    "shift": DomainConfig("shift", camera_shift_px=16),
}

DEFAULT_BENCHMARK = {
    "day": {"train": 20, "val": 8},
    "night": {"train": 10, "val": 8},
    "fog": {"train": 20, "val": 8},
    "shift": {"train": 0, "val": 8},
}


@dataclass(frozen=True)
class SceneConfig:
    frame_size: int = 128
    min_frames: int = 8
    max_frames: int = 40
    min_objects: int = 1
    max_objects: int = 8
    min_size: float = 14.0
    max_size: float = 36.0
    min_speed: float = 0.5
    max_speed: float = 3.0
    jitter_px: float = 1.0
    lanes: int = 3


@dataclass
class FrameAnnotation:
    index: int
    file: str
    boxes: np.ndarray
    categories: list
    track_ids: list = field(default_factory=list)


@dataclass
class SequenceRecord:
    sequence_id: str
    domain: DomainConfig
    seed: int
    frames: list
    split: str = ""
    root: Path | None = None

    def frame_path(self, i) -> Path:
        return self.root / self.frames[i].file

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "sequence_id": self.sequence_id,
            "seed": self.seed,
            "split": self.split,
            "domain": asdict(self.domain),
            "frames": [
                {"index": f.index, "file": f.file,
                 "boxes": [[round(float(v), 3) for v in b] for b in f.boxes],
                 "categories": [int(c) for c in f.categories],
                 "track_ids": [int(t) for t in f.track_ids]}
                for f in self.frames
            ],
        }


# ---------------------------------------------------------------------------- scene layout


def _reflect(dist, lo, hi):
    """Position after travelling ``dist`` from 0 inside ``[lo, hi]`` with elastic walls."""
    span = hi - lo
    if span <= 0:
        return 0.0
    q = np.mod(dist - lo, 2 * span)
    return lo + (q if q <= span else 2 * span - q)


def _layout(scene: SceneConfig, world_w: int, n_frames: int, rng: Stream):
    H = scene.frame_size
    lane_h = H / scene.lanes
    j = scene.jitter_px
    max_size = min(scene.max_size, lane_h - 2 * j - 2)
    n_obj = rng.integers(scene.min_objects, scene.max_objects + 1)
    per_lane = max(1, -(-scene.max_objects // scene.lanes))
    slots = [lane for lane in range(scene.lanes) for _ in range(per_lane)]
    lanes = []
    for _ in range(n_obj):
        lanes.append(slots.pop(rng.integers(0, len(slots))))

    objects = []
    for lane in range(scene.lanes):
        members = [k for k, l in enumerate(lanes) if l == lane]
        if not members:
            continue
        m = len(members)
        sizes = rng.uniform(m, scene.min_size, max_size)
        gap = 2 * j + 2
        free = world_w - sizes.sum() - (m - 1) * gap - 2 * j
        if free < 0:
            sizes = sizes * (world_w - (m - 1) * gap - 2 * j) / sizes.sum()
            free = 0.0
        weights = rng.uniform(m + 1)
        weights = weights / weights.sum() * free
        speed = rng.uniform(None, scene.min_speed, scene.max_speed)
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        x = j + weights[0]
        lefts = []
        for i in range(m):
            lefts.append(x)
            x += sizes[i] + gap + weights[i + 1]
        group_lo = lefts[0] - j
        group_hi = lefts[-1] + sizes[-1] + j
        off_lo, off_hi = -group_lo, world_w - group_hi
        for i, k in enumerate(members):
            size = float(sizes[i])
            slack = max(0.0, (lane_h - size) / 2 - j - 1)
            cy = (lane + 0.5) * lane_h + rng.uniform(None, -slack, slack)
            cat = rng.integers(0, len(CATEGORIES))
            color = rng.uniform(3, 0.1, 0.3)
            color[cat] = rng.uniform(None, 0.7, 0.95)
            jit = rng.uniform(2 * n_frames, -j, j).reshape(n_frames, 2) if j > 0 else np.zeros((n_frames, 2))
            objects.append({
                "track": k, "category": cat, "size": size, "color": color,
                "cx0": lefts[i] + size / 2, "cy": cy, "jitter": jit,
                "speed": speed * direction, "off_lo": off_lo, "off_hi": off_hi,
            })
    objects.sort(key=lambda o: o["track"])
    return objects


def _background(scene: SceneConfig, world_w: int, rng: Stream):
    H = scene.frame_size
    base = rng.uniform(None, 0.35, 0.6)
    yy, xx = np.mgrid[0:H, 0:world_w].astype(np.float64)
    lum = np.full((H, world_w), base)
    for _ in range(3):
        fx, fy = rng.uniform(2, 0.01, 0.08)
        phase = rng.uniform(None, 0, 2 * np.pi)
        amp = rng.uniform(None, 0.01, 0.04)
        lum += amp * np.sin(fx * xx + fy * yy + phase)
    # neutral grey: every channel equal, so no pixel has a colour class
    return np.repeat(lum[:, :, None], 3, axis=2)


def _object_box(obj, t):
    off = _reflect(obj["speed"] * t, obj["off_lo"], obj["off_hi"])
    cx = obj["cx0"] + off + obj["jitter"][t, 0]
    cy = obj["cy"] + obj["jitter"][t, 1]
    h = obj["size"] / 2
    return np.array([cx - h, cy - h, cx + h, cy + h])


def _coverage(category, box, x0, y0, w, h):
    """Fractional area of the shape inside each pixel of the window ``[x0, x0+w) x [y0, y0+h)``."""
    s = _SUPERSAMPLE
    xs = x0 + (np.arange(w * s) + 0.5) / s
    ys = y0 + (np.arange(h * s) + 0.5) / s
    X, Y = np.meshgrid(xs, ys)
    bx1, by1, bx2, by2 = box
    cx, cy = (bx1 + bx2) / 2, (by1 + by2) / 2
    r = (bx2 - bx1) / 2
    if CATEGORIES[category] == "circle":
        inside = (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
    elif CATEGORIES[category] == "square":
        inside = (X >= bx1) & (X <= bx2) & (Y >= by1) & (Y <= by2)
    else:
        frac = (Y - by1) / (by2 - by1)
        inside = (Y >= by1) & (Y <= by2) & (np.abs(X - cx) <= frac * r)
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def _render(bg, objects, t):
    img = bg.copy()
    H, W = img.shape[:2]
    boxes = []
    for obj in objects:
        box = _object_box(obj, t)
        boxes.append(box)
        x0 = max(0, int(np.floor(box[0])))
        y0 = max(0, int(np.floor(box[1])))
        x1 = min(W, int(np.ceil(box[2])))
        y1 = min(H, int(np.ceil(box[3])))
        if x1 <= x0 or y1 <= y0:
            continue
        a = _coverage(obj["category"], box, x0, y0, x1 - x0, y1 - y0)[:, :, None]
        win = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = win * (1 - a) + obj["color"][None, None, :] * a
    return img, boxes


def apply_domain(img, domain: DomainConfig, noise: Stream | None = None):
    out = img * domain.brightness_scale
    if domain.noise_sigma > 0:
        if noise is None:
            raise ValueError("noise stream required for a noisy domain")
        out = out + noise.normal(out.size, sigma=domain.noise_sigma).reshape(out.shape)
    if domain.fog_alpha > 0:
        out = (1 - domain.fog_alpha) * out + domain.fog_alpha * 0.5
    return out


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_sequence(domain: DomainConfig, seed: int, scene: SceneConfig | None = None,
                      sequence_id: str | None = None, n_frames: int | None = None):
    """Render one sequence. Returns ``(SequenceRecord, frames)`` with ``frames`` as ``H x W x 3`` uint8."""
    scene = scene or SceneConfig()
    rng = Stream(seed, _SCENE_STREAM)
    noise = Stream(seed, _NOISE_STREAM)
    if n_frames is None:
        n_frames = rng.integers(scene.min_frames, scene.max_frames + 1)
    if n_frames < 2:
        raise ValueError("a sequence needs at least two frames")
    H = scene.frame_size
    world_w = H + domain.camera_shift_px
    objects = _layout(scene, world_w, n_frames, rng)
    bg = _background(scene, world_w, rng)
    shift = domain.camera_shift_px

    frames, annots = [], []
    for t in range(n_frames):
        world, boxes = _render(bg, objects, t)
        img = apply_domain(world[:, shift:shift + H], domain, noise)
        frames.append(to_uint8(img))
        kept, cats, tracks = [], [], []
        for obj, b in zip(objects, boxes):
            b = b.copy()
            b[[0, 2]] -= shift
            b = np.clip(b, 0, H)
            if b[2] - b[0] < _MIN_VISIBLE_PX or b[3] - b[1] < _MIN_VISIBLE_PX:
                continue
            kept.append(b)
            cats.append(obj["category"])
            tracks.append(obj["track"])
        annots.append(FrameAnnotation(t, f"frame_{t:04d}.png",
                                      np.array(kept, dtype=np.float64).reshape(-1, 4), cats, tracks))
    sid = sequence_id or f"{domain.name}-{seed:016x}"
    return SequenceRecord(sid, domain, int(seed), annots), frames


def write_sequence(record: SequenceRecord, frames, seq_dir) -> str:
    """Write PNG frames and ``annotations.json``; returns a sha256 over all written bytes."""
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    h = hashlib.sha256()
    for ann, img in zip(record.frames, frames):
        path = seq_dir / ann.file
        Image.fromarray(img).save(path, format="PNG", optimize=False)
        h.update(path.read_bytes())
    text = json.dumps(record.to_json(), sort_keys=True, indent=1)
    (seq_dir / "annotations.json").write_text(text)
    h.update(text.encode("utf-8"))
    record.root = seq_dir
    return h.hexdigest()


def domain_from_spec(name, overrides=None) -> DomainConfig:
    base = DOMAINS.get(name, DomainConfig(name))
    if overrides:
        unknown = set(overrides) - {f.name for f in fields(DomainConfig)}
        if unknown:
            raise ValueError(f"unknown domain setting(s): {sorted(unknown)}")
        base = replace(base, **overrides)
    return replace(base, name=name)


def _write_manifest(path, manifest):
    text = json.dumps(manifest, sort_keys=True, indent=1)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def generate_benchmark(spec: dict, out_dir, master_seed: int = 0, scene: SceneConfig | None = None) -> dict:
    """Build train/val splits per domain under ``out_dir`` and return the root manifest.

    ``spec`` maps domain names to ``{"train": n, "val": n}``; an optional
    ``"config"`` entry per domain overrides :class:`DomainConfig` fields. Unknown
    domain names start from the plain day configuration. Writes
    ``<domain>/<split>/<sequence_id>/`` directories, a ``manifest.json`` in
    every split directory, and a root ``manifest.json``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise BenchmarkError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    scene = scene or SceneConfig()
    sequences = []
    splits = {}
    for dname in sorted(spec):
        entry = dict(spec[dname])
        domain = domain_from_spec(dname, entry.pop("config", None))
        for split in sorted(entry):
            count = int(entry[split])
            if count < 0:
                raise BenchmarkError(f"negative sequence count for {dname}/{split}")
            split_key = f"{dname}/{split}"
            split_seqs = []
            for i in range(count):
                sid = f"{dname}-{split}-{i:04d}"
                seed = derive_seed(master_seed, dname, split, i)
                record, frames = generate_sequence(domain, seed, scene, sid)
                record.split = split
                digest = write_sequence(record, frames, out / dname / split / sid)
                split_seqs.append({"id": sid, "domain": dname, "split": split,
                                   "n_frames": len(frames), "sha256": digest})
            splits[split_key] = {"domain": asdict(domain), "sequences": [s["id"] for s in split_seqs]}
            if count:
                _write_manifest(out / dname / split / "manifest.json", {
                    "schema_version": SCHEMA_VERSION, "master_seed": master_seed,
                    "splits": {split_key: splits[split_key]},
                    "sequences": [dict(s, path=s["id"]) for s in split_seqs],
                })
            sequences.extend(dict(s, path=f"{dname}/{split}/{s['id']}") for s in split_seqs)
    manifest = {"schema_version": SCHEMA_VERSION, "master_seed": master_seed,
                "scene": asdict(scene), "spec": spec, "splits": splits, "sequences": sequences}
    manifest["hash"] = _write_manifest(out / "manifest.json", manifest)
    return manifest


def manifest_hash(path) -> str:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return hashlib.sha256(p.read_bytes()).hexdigest()


def reset_dir(path):
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
