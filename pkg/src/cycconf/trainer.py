"""Joint detector + auxiliary-task optimisation and the rotation-based UDA mode."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import cycmatch
from .datapipe import DatasetIndex, UnlabeledFrames, sample_frame_pair, to_tensor
from .detector import DetectorConfig, ToyDetector, save_checkpoint, select_proposals
from .detector.losses import DetectionLoss, forward_detection
from .rng import derive_seed
from .ssl_tasks import assemble_tiles, jigsaw_shuffle, random_origin, rotate_and_label, torch_cross_entropy

SSL_TASKS = ("cycconf", "cycle_consistency", "rotation", "jigsaw", "none")
MODES = ("ood", "uda")
TRACE_COLUMNS = ("iteration", "det_total", "ssl", "total", "lr",
                 "n_proposals_t0", "n_proposals_t1", "match_entropy")
_MATCH_MODE = {"cycconf": cycmatch.CONFUSION, "cycle_consistency": cycmatch.CONSISTENCY}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message if dump_path is None else f"{message} (diagnostics: {dump_path})")
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    gamma: float = 0.01
    lambda_rot: float = 0.5
    ssl_task: str = "none"
    mode: str = "ood"
    S: float = 0.8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    total_iters: int = 2000
    lr_milestones: tuple | None = None  # None: 60% and 80% of total_iters
    seed: int = 0
    pair_gap: int = 1
    temperature: float = 1.0
    symmetric: bool = False
    ssl_crop: int = 0  # 0 means the full frame

    def __post_init__(self):
        if self.lr_milestones is None:
            t = self.total_iters
            self.lr_milestones = tuple(sorted({m for m in (int(0.6 * t), int(0.8 * t)) if 0 < m < t}))
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.validate()

    def validate(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.lambda_rot < 0:
            raise ConfigError("lambda_rot must be >= 0")
        if not 0.0 <= self.S <= 1.0:
            raise ConfigError("S must lie in [0, 1]")
        if self.ssl_task not in SSL_TASKS:
            raise ConfigError(f"ssl_task must be one of {SSL_TASKS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("lr_milestones must be strictly increasing")
        if ms and self.total_iters > 0 and ms[-1] >= self.total_iters:
            raise ConfigError("lr_milestones must be < total_iters")
        if self.batch_size < 1 or self.pair_gap < 1 or self.total_iters < 0:
            raise ConfigError("batch_size and pair_gap must be positive, total_iters >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def lr_at(self, iteration: int) -> float:
        """Base lr divided by 10 at every milestone already reached."""
        drops = sum(1 for m in self.lr_milestones if iteration >= m)
        return self.lr * (0.1 ** drops)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        return cls(**{**parse_kv(text), **overrides})


def parse_kv(text: str) -> dict:
    """Parse flat ``key=value`` lines (``#`` comments) into typed TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def _coerce(key, typ, value):
    try:
        if typ in ("float", float):
            return float(value)
        if typ in ("int", int):
            return int(value)
        if typ in ("bool", bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in ("tuple", tuple) or "tuple" in str(typ):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


@dataclass
class LossBundle:
    det: dict
    ssl: float
    total: float
    iteration: int
    skipped_ssl: bool
    ssl_weight: float
    lr: float = 0.0
    n_proposals_t0: float = 0.0
    n_proposals_t1: float = 0.0
    match_entropy: float = float("nan")

    @property
    def det_total(self):
        return self.det["total"]

    def trace_row(self):
        return [self.iteration, self.det_total, self.ssl, self.total, self.lr,
                self.n_proposals_t0, self.n_proposals_t1, self.match_entropy]


def build_model(seed: int, det_config: DetectorConfig | None = None) -> ToyDetector:
    torch.manual_seed(derive_seed(seed, "init") % (2 ** 63))
    return ToyDetector(det_config)


def make_optimizer(model, config: TrainConfig):
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def _targets(boxes_list, labels_list, dtype):
    return ([torch.as_tensor(b, dtype=dtype).reshape(-1, 4) for b in boxes_list],
            [torch.as_tensor(l, dtype=torch.long) for l in labels_list])


def _pair_batch(pairs, dtype=torch.float32):
    images = []
    boxes, labels = [], []
    for p in pairs:
        images += [p.image0, p.image1]
        boxes += [p.boxes0, p.boxes1]
        labels += [p.labels0, p.labels1]
    x = to_tensor(images).to(dtype)
    gb, gl = _targets(boxes, labels, dtype)
    return x, gb, gl


def instance_embeddings(model, feats, proposals, S, cap=None):
    """Embeddings of proposals scoring >= S, one ``(N_b, D)`` tensor per image."""
    selected = [select_proposals(p, S, cap) for p in proposals]
    boxes = [s.boxes for s in selected]
    counts = [len(s) for s in selected]
    D = model.config.embed_dim
    if sum(counts) == 0:
        return [feats.new_zeros((0, D)) for _ in counts], selected
    emb = model.instance_encoder(model.roi_features(feats, boxes))
    return list(torch.split(emb, counts)), selected


def _ssl_images(images_u8, task, rng: np.random.Generator, crop):
    crop = crop or None
    xs, labels = [], []
    for img in images_u8:
        origin = random_origin(img.shape, crop, rng)
        if task == "rotation":
            label = int(rng.integers(4))
            xs.append(rotate_and_label(img, label, crop, origin).image)
        else:
            label = int(rng.integers(24))
            xs.append(assemble_tiles(jigsaw_shuffle(img, label, crop, origin).tiles))
        labels.append(label)
    return to_tensor(xs), labels


def _image_ssl_loss(model, images_u8, task, rng, crop, dtype):
    x, labels = _ssl_images(images_u8, task, rng, crop)
    feats = model.backbone_forward(x.to(dtype))
    logits = model.rotation_logits(feats) if task == "rotation" else model.jigsaw_logits(feats)
    return torch_cross_entropy(logits, labels)


def _cycle_ssl(model, feats, proposals, config: TrainConfig):
    emb, selected = instance_embeddings(model, feats, proposals, config.S, model.config.max_proposals)
    losses, entropies = [], []
    n0 = [len(selected[2 * i]) for i in range(len(selected) // 2)]
    n1 = [len(selected[2 * i + 1]) for i in range(len(selected) // 2)]
    for i in range(len(selected) // 2):
        loss, res = cycmatch.torch_cycle_loss(emb[2 * i], emb[2 * i + 1], _MATCH_MODE[config.ssl_task],
                                              config.temperature, config.symmetric)
        if res.skipped:
            continue
        losses.append(loss)
        entropies.append(cycmatch.matching_entropy(res.alpha))
    stats = {"n0": float(np.mean(n0)), "n1": float(np.mean(n1)),
             "entropy": float(np.mean(entropies)) if entropies else float("nan")}
    if not losses:
        return None, stats
    return torch.stack(losses).mean(), stats


def _zero_grads(model):
    # every parameter gets a (possibly zero) gradient so weight decay and
    # momentum treat all tasks identically
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


def _check_finite(model, values, iteration, diag_dir):
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    bad += [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if not bad:
        return
    dump = None
    if diag_dir is not None:
        dump = Path(diag_dir) / f"diverged_iter{iteration}.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"iteration": iteration, "values": values, "non_finite": bad},
                                   indent=1, default=str))
    raise TrainingDiverged(f"non-finite loss or gradient at iteration {iteration}: {bad}", dump)


def _apply_update(model, optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.step()


def joint_step(model, optimizer, pairs, config: TrainConfig, iteration=0,
               ssl_rng: np.random.Generator | None = None, diag_dir=None) -> LossBundle:
    """One SGD step on ``L_det + gamma * L_ssl`` over a batch of frame pairs.

    Detection loss is averaged over both frames of every pair. Cycle tasks use
    the proposals of each frame scoring at least ``config.S``; when no pair
    has proposals on both sides the auxiliary term is skipped.
    """
    dtype = next(model.parameters()).dtype
    x, gt_boxes, gt_labels = _pair_batch(pairs, dtype)
    _zero_grads(model)
    feats = model.backbone_forward(x)
    rpn_out = model.rpn_forward(feats)
    proposals = model.propose(feats, x.shape[2:], rpn_out)
    det_losses, _ = forward_detection(model, feats, x.shape[2:], gt_boxes, gt_labels, rpn_out, proposals)
    det = DetectionLoss.mean(det_losses)

    stats = {"n0": 0.0, "n1": 0.0, "entropy": float("nan")}
    ssl_loss = None
    task = config.ssl_task
    if task in _MATCH_MODE:
        ssl_loss, stats = _cycle_ssl(model, feats, proposals, config)
    elif task in ("rotation", "jigsaw"):
        if ssl_rng is None:
            raise ConfigError(f"{task} needs an ssl_rng")
        frames = [im for p in pairs for im in (p.image0, p.image1)]
        ssl_loss = _image_ssl_loss(model, frames, task, ssl_rng, config.ssl_crop, dtype)

    objective = det.total if ssl_loss is None else det.total + config.gamma * ssl_loss
    objective.backward()

    det_vals = det.as_dict()
    ssl_val = 0.0 if ssl_loss is None else float(ssl_loss.detach())
    skipped = ssl_loss is None
    total = det_vals["total"] if skipped else det_vals["total"] + config.gamma * ssl_val
    lr = config.lr_at(iteration)
    _check_finite(model, {"det_total": det_vals["total"], "ssl": ssl_val, "total": total}, iteration, diag_dir)
    _apply_update(model, optimizer, lr)
    return LossBundle(det_vals, ssl_val, total, iteration, skipped, config.gamma, lr,
                      stats["n0"], stats["n1"], stats["entropy"])


def uda_step(model, optimizer, source_pairs, target_images, config: TrainConfig, iteration=0,
             ssl_rng: np.random.Generator | None = None, diag_dir=None) -> LossBundle:
    """Detection on labelled source frames plus rotation on source and target frames.

    Gradient is ``grad L_det(src) + lambda * (grad L_rot(src) + grad L_rot(tgt))``.
    ``target_images`` are raw frames; no target annotation is consulted.
    """
    if ssl_rng is None:
        raise ConfigError("uda_step needs an ssl_rng")
    task = config.ssl_task if config.ssl_task in ("rotation", "jigsaw") else "rotation"
    dtype = next(model.parameters()).dtype
    x, gt_boxes, gt_labels = _pair_batch(source_pairs, dtype)
    _zero_grads(model)
    feats = model.backbone_forward(x)
    det_losses, _ = forward_detection(model, feats, x.shape[2:], gt_boxes, gt_labels)
    det = DetectionLoss.mean(det_losses)

    src_frames = [im for p in source_pairs for im in (p.image0, p.image1)]
    rot_src = _image_ssl_loss(model, src_frames, task, ssl_rng, config.ssl_crop, dtype)
    rot_tgt = _image_ssl_loss(model, list(target_images), task, ssl_rng, config.ssl_crop, dtype)
    ssl_loss = rot_src + rot_tgt
    (det.total + config.lambda_rot * ssl_loss).backward()

    det_vals = det.as_dict()
    ssl_val = float(ssl_loss.detach())
    total = det_vals["total"] + config.lambda_rot * ssl_val
    lr = config.lr_at(iteration)
    _check_finite(model, {"det_total": det_vals["total"], "ssl": ssl_val, "total": total}, iteration, diag_dir)
    _apply_update(model, optimizer, lr)
    return LossBundle(det_vals, ssl_val, total, iteration, False, config.lambda_rot, lr)


@dataclass
class TrainResult:
    checkpoint: Path | None
    checkpoint_sha256: str | None
    trace: list = field(default_factory=list)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trace(path, bundles):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for b in bundles:
            w.writerow([_fmt(v) for v in b.trace_row()])


def read_trace(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]


def train(model, source: DatasetIndex, config: TrainConfig, out_dir=None,
          target: UnlabeledFrames | None = None, progress=None) -> TrainResult:
    """Run ``config.total_iters`` steps; writes ``checkpoint.ckpt`` and ``loss_trace.csv`` to ``out_dir``.

    Pair sampling, SSL augmentation and target sampling each draw from their
    own Philox stream derived from ``config.seed``.
    """
    config.validate()
    if config.mode == "uda" and target is None:
        raise ConfigError("uda mode needs target frames")
    torch.set_num_threads(1)
    pair_rng = np.random.Generator(np.random.Philox(derive_seed(config.seed, "pairs")))
    ssl_rng = np.random.Generator(np.random.Philox(derive_seed(config.seed, "ssl")))
    tgt_rng = np.random.Generator(np.random.Philox(derive_seed(config.seed, "target")))
    optimizer = make_optimizer(model, config)
    out = Path(out_dir) if out_dir is not None else None
    bundles = []
    model.train()
    for it in range(config.total_iters):
        pairs = [sample_frame_pair(source, pair_rng, config.pair_gap) for _ in range(config.batch_size)]
        if config.mode == "uda":
            idx = tgt_rng.integers(len(target), size=2 * config.batch_size)
            bundle = uda_step(model, optimizer, pairs, [target.image(int(i)) for i in idx],
                              config, it, ssl_rng, out)
        else:
            bundle = joint_step(model, optimizer, pairs, config, it, ssl_rng, out)
        bundles.append(bundle)
        if progress is not None:
            progress(bundle)
    ckpt = sha = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_trace(out / "loss_trace.csv", bundles)
        ckpt = out / "checkpoint.ckpt"
        sha = save_checkpoint(model, ckpt, extra={"train_config": _config_json(config)})
    return TrainResult(ckpt, sha, bundles)


def _config_json(config: TrainConfig):
    d = asdict(config)
    d["lr_milestones"] = list(config.lr_milestones)
    return d
