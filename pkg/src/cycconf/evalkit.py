"""COCO-style detection metrics and the in-domain / out-of-domain report.

Conventions: detections are matched greedily in descending score order (ties
keep input order), each to the unmatched ground-truth box of highest IoU
(ties go to the lower GT index). The PR curve is interpolated at every point
(precision made monotone from the right) and AP is the area under it. Size
buckets follow COCO: area < 32^2 small, < 96^2 medium, otherwise large;
GT outside the bucket is ignored, as are unmatched detections outside it.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .datapipe import DatasetIndex, to_tensor
from .synthvid import CATEGORIES

SCHEMA_VERSION = 1
METRICS = ("AP", "AP50", "AP75", "APs", "APm", "APl")
IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
AREA_RANGES = {"all": (0.0, math.inf), "small": (0.0, 32.0 ** 2),
               "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, math.inf)}


class EvaluationError(RuntimeError):
    pass


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _iou_matrix(dets, gts):
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(dets[:, None, :2], gts[None, :, :2])
    rb = np.minimum(dets[:, None, 2:], gts[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_d = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    area_g = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    union = area_d[:, None] + area_g[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _area(box):
    return (box[2] - box[0]) * (box[3] - box[1])


def _normalise(detections, ground_truth):
    """Accept single-image lists or multi-image ``(image_id, ...)`` records."""
    if isinstance(ground_truth, dict):
        gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in ground_truth.items()}
        dets = [(d[0], float(d[1]), np.asarray(d[2], dtype=np.float64)) for d in detections]
    else:
        gts = {0: np.asarray(ground_truth, dtype=np.float64).reshape(-1, 4)}
        dets = [(0, float(d[0]), np.asarray(d[1], dtype=np.float64)) for d in detections]
    return dets, gts


def match_detections(detections, ground_truth, iou_threshold, area_range=(0.0, math.inf)):
    """Greedy matching. Returns ``(scores, flags, n_gt)`` with flags 1 TP, 0 FP, -1 ignored."""
    dets, gts = _normalise(detections, ground_truth)
    lo, hi = area_range
    ignore = {k: np.array([not (lo <= _area(b) < hi) for b in g], dtype=bool) for k, g in gts.items()}
    n_gt = int(sum((~ig).sum() for ig in ignore.values()))
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {k: np.zeros(len(g), dtype=bool) for k, g in gts.items()}
    scores, flags = [], []
    for i in order:
        img, score, box = dets[i]
        g = gts.get(img, np.zeros((0, 4)))
        flag = 0
        if len(g):
            row = _iou_matrix(box[None], g)[0]
            best = -1
            for pass_ignored in (False, True):
                cand = np.where(~used[img] & (ignore[img] == pass_ignored) & (row >= iou_threshold))[0]
                if len(cand):
                    best = cand[np.argmax(row[cand])]  # argmax keeps the first (lowest index) tie
                    break
            if best >= 0:
                used[img][best] = True
                flag = -1 if ignore[img][best] else 1
        if flag == 0 and not (lo <= _area(box) < hi):
            flag = -1
        scores.append(score)
        flags.append(flag)
    return np.array(scores), np.array(flags, dtype=int), n_gt


def ap_from_flags(flags, n_gt) -> float:
    """All-point interpolated AP from TP/FP flags already in descending score order."""
    if n_gt == 0:
        return float("nan")
    flags = np.asarray(flags)
    flags = flags[flags >= 0]
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags == 1)
    fp = np.cumsum(flags == 0)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(detections, ground_truth, iou_threshold=0.5, area_range=(0.0, math.inf)) -> float:
    """AP of scored detections against ground truth at one IoU threshold.

    ``detections`` are ``(score, box)`` for a single image with
    ``ground_truth`` a list of boxes, or ``(image_id, score, box)`` with
    ``ground_truth`` a dict ``image_id -> boxes``. NaN when there is no GT.
    """
    _, flags, n_gt = match_detections(detections, ground_truth, iou_threshold, area_range)
    return ap_from_flags(flags, n_gt)


@dataclass
class APReport:
    metrics: dict
    per_class: dict
    n_images: int
    class_names: tuple = CATEGORIES
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        clean = lambda v: None if v is None or (isinstance(v, float) and math.isnan(v)) else v  # noqa: E731
        return {
            "schema_version": SCHEMA_VERSION,
            "n_images": self.n_images,
            "metrics": {k: clean(self.metrics[k]) for k in METRICS},
            "per_class": {c: {k: clean(v) for k, v in d.items()} for c, d in self.per_class.items()},
        }

    @classmethod
    def from_json(cls, d):
        nan = lambda v: float("nan") if v is None else v  # noqa: E731
        return cls({k: nan(v) for k, v in d["metrics"].items()},
                   {c: {k: nan(v) for k, v in m.items()} for c, m in d["per_class"].items()},
                   d["n_images"])


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate_predictions(predictions, ground_truth, class_names=CATEGORIES) -> APReport:
    """``predictions``/``ground_truth``: per-image dicts with ``boxes``, ``labels`` (+ ``scores``)."""
    if len(ground_truth) == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    per_class = {}
    for c, name in enumerate(class_names):
        gts = {}
        dets = []
        for img, (p, g) in enumerate(zip(predictions, ground_truth)):
            gl = np.asarray(g["labels"])
            gts[img] = np.asarray(g["boxes"], dtype=np.float64).reshape(-1, 4)[gl == c]
            pl = np.asarray(p["labels"])
            pb = np.asarray(p["boxes"], dtype=np.float64).reshape(-1, 4)
            ps = np.asarray(p["scores"], dtype=np.float64)
            dets.extend((img, float(s), b) for s, b in zip(ps[pl == c], pb[pl == c]))
        n_inst = int(sum(len(v) for v in gts.values()))
        res = {"n_instances": n_inst}
        aps = {t: average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
        res["AP"] = _nanmean(list(aps.values())) if n_inst else float("nan")
        res["AP50"] = aps[0.5]
        res["AP75"] = aps[0.75]
        for key, rng in (("APs", "small"), ("APm", "medium"), ("APl", "large")):
            res[key] = _nanmean([average_precision(dets, gts, t, AREA_RANGES[rng]) for t in IOU_THRESHOLDS])
        per_class[name] = res
    metrics = {m: _nanmean([per_class[n][m] for n in class_names]) for m in METRICS}
    return APReport(metrics, per_class, len(ground_truth), tuple(class_names))


@torch.no_grad()
def predict(model, index: DatasetIndex, batch_size=16, score_thresh=0.05, nms_iou=0.5):
    torch.set_num_threads(1)
    model.eval()
    keys = list(index.frames())
    preds, gts = [], []
    for start in range(0, len(keys), batch_size):
        chunk = keys[start:start + batch_size]
        x = to_tensor([index.image(i, t) for i, t in chunk]).to(next(model.parameters()).dtype)
        for out in model.detect(x, score_thresh, nms_iou):
            preds.append({k: v.cpu().numpy() for k, v in out.items()})
        for i, t in chunk:
            f = index.sequences[i].frames[t]
            gts.append({"boxes": f.boxes, "labels": np.asarray(f.categories, dtype=int)})
    return preds, gts


def evaluate(model, index: DatasetIndex, score_thresh=0.05, nms_iou=0.5) -> APReport:
    if len(index) == 0 or index.n_frames == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    preds, gts = predict(model, index, score_thresh=score_thresh, nms_iou=nms_iou)
    return evaluate_predictions(preds, gts)


def ood_report(model, train_domain: DatasetIndex, test_domain: DatasetIndex) -> dict:
    """In-domain and out-of-domain reports plus per-metric deltas (out minus in)."""
    ind = evaluate(model, train_domain)
    ood = evaluate(model, test_domain)
    return compose_ood_report(ind, ood)


def compose_ood_report(ind: APReport, ood: APReport) -> dict:
    delta = {m: ood.metrics[m] - ind.metrics[m] for m in METRICS}
    clean = lambda v: None if math.isnan(v) else v  # noqa: E731
    return {"schema_version": SCHEMA_VERSION, "metrics": list(METRICS),
            "in_domain": ind.to_json(), "out_of_domain": ood.to_json(),
            "delta": {m: clean(v) for m, v in delta.items()}}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "metrics", "in_domain", "out_of_domain", "delta"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "metrics": {"const": list(METRICS)},
        "in_domain": {"$ref": "#/$defs/ap"},
        "out_of_domain": {"$ref": "#/$defs/ap"},
        "delta": {"$ref": "#/$defs/metrics"},
    },
    "$defs": {
        "value": {"type": ["number", "null"]},
        "metrics": {"type": "object", "required": list(METRICS), "additionalProperties": False,
                    "properties": {m: {"$ref": "#/$defs/value"} for m in METRICS}},
        "ap": {"type": "object", "required": ["schema_version", "n_images", "metrics", "per_class"],
               "properties": {"metrics": {"$ref": "#/$defs/metrics"},
                              "n_images": {"type": "integer", "minimum": 0},
                              "per_class": {"type": "object"}}},
    },
}


def _fmt100(v):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100.0 * v:.2f}"


def format_table(report: dict, title: str = "") -> str:
    """Fixed-width table with one row per model/domain and the six AP columns (x100)."""
    rows = [("in-domain", report["in_domain"]["metrics"]),
            ("out-of-domain", report["out_of_domain"]["metrics"]),
            ("delta", report["delta"])]
    head = f"{'Model':<16}" + "".join(f"{m:>8}" for m in METRICS)
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for name, vals in rows:
        lines.append(f"{name:<16}" + "".join(f"{_fmt100(vals[m]):>8}" for m in METRICS))
    return "\n".join(lines) + "\n"


def per_category_csv(reports: dict, class_names=CATEGORIES) -> str:
    """Rows ``Model, AP, AP50, AP75, <class AP50...>`` headed by a ``# Instances`` row."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["Model", "AP", "AP50", "AP75", *class_names])
    first = next(iter(reports.values()))
    w.writerow(["# Instances", "", "", "", *[first["per_class"][c]["n_instances"] for c in class_names]])
    for name, rep in reports.items():
        m = rep["metrics"]
        w.writerow([name, _fmt100(m["AP"]), _fmt100(m["AP50"]), _fmt100(m["AP75"]),
                    *[_fmt100(rep["per_class"][c]["AP50"]) for c in class_names]])
    return buf.getvalue()


def dumps(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
