"""``cycconf`` command line: generate-data, train, eval, inspect-matching.

Exit codes: 0 success, 1 runtime failure, 2 usage error or missing input.

Configuration precedence for ``train`` (highest first): explicit CLI flags,
then ``--config`` file values, then built-in defaults. The seed has one more
fallback between the config file and the default: the ``CYCCONF_SEED``
environment variable.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import __version__, cycmatch, evalkit, plotting
from .datapipe import DatasetError, load_dataset, load_unlabeled, sample_frame_pair, to_tensor
from .detector import load_checkpoint
from .detector.checkpoint import CheckpointError
from .rng import derive_seed
from .synthvid import DEFAULT_BENCHMARK, BenchmarkError, generate_benchmark, manifest_hash, reset_dir
from .trainer import (MODES, SSL_TASKS, ConfigError, TrainConfig, TrainingDiverged, build_model,
                      instance_embeddings, parse_kv, read_trace, train)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        reset_dir(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_seed(flag, file_values):
    if flag is not None:
        return flag
    if "seed" in file_values:
        return file_values["seed"]
    env = os.environ.get("CYCCONF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"CYCCONF_SEED must be an integer, got {env!r}") from None
    return 0


# ---------------------------------------------------------------------------- generate-data

def _load_spec(path):
    if path is None:
        return DEFAULT_BENCHMARK
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"spec file not found: {p}")
    try:
        spec = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"could not parse spec file {p}: {e}") from None
    if not isinstance(spec, dict) or not spec:
        raise UsageError(f"spec file {p} must hold a non-empty object of domains")
    for name, entry in spec.items():
        if not isinstance(entry, dict):
            raise UsageError(f"spec entry {name!r} must be an object")
        for key, val in entry.items():
            if key != "config" and (not isinstance(val, int) or isinstance(val, bool) or val < 0):
                raise UsageError(f"spec entry {name}.{key} must be a non-negative integer")
    return spec


def cmd_generate_data(args):
    spec = _load_spec(args.spec)
    seed = _resolve_seed(args.seed, {})
    out = _prepare_out(args.out, args.force)
    try:
        manifest = generate_benchmark(spec, out, seed)
    except ValueError as e:
        raise UsageError(f"invalid domain configuration in spec: {e}") from None
    print(f"wrote {len(manifest['sequences'])} sequences to {out}")
    print(f"manifest sha256 {manifest['hash']}")
    return EXIT_OK


# ---------------------------------------------------------------------------- train

def _train_config(args):
    file_values = {}
    if args.config is not None:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        file_values = parse_kv(p.read_text())
    flags = {"ssl_task": args.task, "mode": args.mode, "total_iters": args.iters,
             "gamma": args.gamma, "S": args.S, "batch_size": args.batch_size}
    values = {**file_values, **{k: v for k, v in flags.items() if v is not None}}
    values["seed"] = _resolve_seed(args.seed, file_values)
    return TrainConfig(**values)


def cmd_train(args):
    config = _train_config(args)
    if config.mode == "uda" and args.target_data is None:
        raise UsageError("--mode uda requires --target-data")
    data = Path(args.data)
    if not (data / "manifest.json").is_file():
        raise UsageError(f"no dataset manifest at {data}")
    try:
        source = load_dataset(data)
        target = load_unlabeled(args.target_data) if config.mode == "uda" else None
    except DatasetError as e:
        raise UsageError(str(e)) from None
    out = _prepare_out(args.out, args.force)
    _atomic_write(out / "config.txt", config.to_text())
    experiment = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "seed": config.seed,
        "config": config.to_text(),
        "dataset_manifest_sha256": manifest_hash(data),
        "target_manifest_sha256": manifest_hash(args.target_data) if target is not None else None,
        "outputs": {"checkpoint": "checkpoint.ckpt", "loss_trace": "loss_trace.csv",
                    "loss_plot": "loss_trace.png", "config": "config.txt"},
        "status": "started",
    }
    _dump_json(out / "experiment.json", experiment)
    model = build_model(config.seed)
    every = max(1, config.total_iters // 10)

    def progress(b):
        if b.iteration % every == 0 or b.iteration == config.total_iters - 1:
            print(f"iter {b.iteration:5d}  det {b.det_total:.4f}  ssl {b.ssl:.4f}  lr {b.lr:g}", flush=True)

    result = train(model, source, config, out, target, progress if not args.quiet else None)
    plotting.plot_loss_trace(read_trace(out / "loss_trace.csv"), out / "loss_trace.png")
    experiment.update(status="completed", checkpoint_sha256=result.checkpoint_sha256)
    _dump_json(out / "experiment.json", experiment)
    print(f"checkpoint sha256 {result.checkpoint_sha256}")
    return EXIT_OK


# ---------------------------------------------------------------------------- eval

def _load_ckpt(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def _load_index(path, flag):
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise UsageError(f"{flag}: no dataset manifest at {p}")
    try:
        return load_dataset(p)
    except DatasetError as e:
        raise UsageError(str(e)) from None


def cmd_eval(args):
    model, _ = _load_ckpt(args.ckpt)
    train_idx = _load_index(args.train_domain, "--train-domain")
    test_idx = _load_index(args.test_domain, "--test-domain")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evalkit.ood_report(model, train_idx, test_idx)
    report["checkpoint_sha256"] = hashlib.sha256(Path(args.ckpt).read_bytes()).hexdigest()
    _dump_json(out / "report.json", report)
    table = evalkit.format_table(report)
    _atomic_write(out / "report.txt", table)
    _atomic_write(out / "per_category.csv", evalkit.per_category_csv(
        {"in-domain": report["in_domain"], "out-of-domain": report["out_of_domain"]}))
    plotting.plot_ood_report(report, evalkit.METRICS, out / "report.png")
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------- inspect-matching

def inspect_matching(model, index, n_pairs, seed, mode, S, temperature=1.0, gap=1):
    """Forward weights, entropies and embeddings on ``n_pairs`` sampled frame pairs.

    Returns a list of dicts, one per pair with proposals on both frames.
    """
    torch.set_num_threads(1)
    rng = np.random.Generator(np.random.Philox(derive_seed(seed, "inspect")))
    model.eval()
    results = []
    with torch.no_grad():
        for k in range(n_pairs):
            pair = sample_frame_pair(index, rng, gap)
            x = to_tensor([pair.image0, pair.image1])
            feats = model.backbone_forward(x)
            proposals = model.propose(feats, x.shape[2:])
            emb, selected = instance_embeddings(model, feats, proposals, S, model.config.max_proposals)
            U, V = emb[0].double().numpy(), emb[1].double().numpy()
            if len(U) == 0 or len(V) == 0:
                continue
            alpha = cycmatch.forward_match_weights(cycmatch.pairwise_sq_dist(U, V), temperature, mode)
            results.append({"pair": k, "sequence_id": pair.sequence_id, "t0": pair.t0, "t1": pair.t1,
                            "alpha": alpha, "entropy": cycmatch.matching_entropy(alpha),
                            "embeddings": (U, V), "proposals": selected})
    return results


def _matching_mode(args, manifest):
    if args.matching is not None:
        return args.matching
    task = manifest.get("extra", {}).get("train_config", {}).get("ssl_task")
    return "cycle_consistency" if task == "cycle_consistency" else "cycconf"


def cmd_inspect_matching(args):
    if args.pairs < 0:
        raise UsageError("--pairs must be >= 0")
    model, manifest = _load_ckpt(args.ckpt)
    index = _load_index(args.data, "--data")
    train_cfg = manifest.get("extra", {}).get("train_config", {})
    S = args.S if args.S is not None else float(train_cfg.get("S", 0.8))
    name = _matching_mode(args, manifest)
    mode = cycmatch.CONSISTENCY if name == "cycle_consistency" else cycmatch.CONFUSION
    seed = _resolve_seed(args.seed, {})
    out = Path(args.out)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    results = inspect_matching(model, index, args.pairs, seed, mode, S,
                               float(train_cfg.get("temperature", 1.0)))
    if args.pairs > 0 and not results:
        warnings.warn(f"no sampled pair has proposals scoring >= {S} on both frames; outputs are empty",
                      stacklevel=1)
    D = model.config.embed_dim
    with open(out / "entropy_summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair", "sequence_id", "t0", "t1", "n0", "n1", "entropy"])
        for r in results:
            w.writerow([r["pair"], r["sequence_id"], r["t0"], r["t1"], *r["alpha"].shape, repr(r["entropy"])])
    with open(out / "embeddings.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair", "frame", "proposal", "score", "x1", "y1", "x2", "y2", *[f"f{i}" for i in range(D)]])
        for r in results:
            for frame, (E, props) in enumerate(zip(r["embeddings"], r["proposals"])):
                for j in range(len(E)):
                    box = props.boxes[j].tolist()
                    w.writerow([r["pair"], frame, j, repr(float(props.scores[j])),
                                *[repr(float(v)) for v in box], *[repr(float(v)) for v in E[j]]])
    for r in results:
        stem = out / "heatmaps" / f"pair_{r['pair']:04d}"
        np.savetxt(f"{stem}.csv", r["alpha"], delimiter=",", fmt="%.17g",
                   header=",".join(f"t1_{j}" for j in range(r["alpha"].shape[1])), comments="")
        if r["pair"] < args.max_figures:
            plotting.plot_match_heatmap(r["alpha"], f"{stem}.png",
                                        f"pair {r['pair']}  H={r['entropy']:.3f}")
    entropies = [r["entropy"] for r in results]
    summary = {"schema_version": SCHEMA_VERSION, "matching": name, "S": S, "seed": seed,
               "pairs_requested": args.pairs, "pairs_with_proposals": len(results),
               "mean_entropy": float(np.mean(entropies)) if entropies else None}
    _dump_json(out / "summary.json", summary)
    if entropies:
        plotting.plot_entropy_summary(entropies, out / "entropy_hist.png")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="cycconf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic multi-domain video benchmark")
    g.add_argument("--spec", help="JSON: {domain: {split: n_sequences, 'config': {...}}}")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true", help="clear a non-empty --out first")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train the detector with an optional auxiliary task")
    t.add_argument("--data", required=True, help="dataset directory holding manifest.json")
    t.add_argument("--task", choices=SSL_TASKS)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--config", help="key=value file; flags given here take precedence")
    t.add_argument("--out", required=True)
    t.add_argument("--target-data", help="unlabelled target frames (uda mode)")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--S", type=float, help="objectness threshold for cycle tasks")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--force", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="in-domain vs out-of-domain AP report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--train-domain", required=True)
    e.add_argument("--test-domain", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-matching", help="export forward matching weights and embeddings")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--pairs", type=int, default=32)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--matching", choices=("cycconf", "cycle_consistency"),
                   help="defaults to the checkpoint's training task")
    m.add_argument("--S", type=float)
    m.add_argument("--max-figures", type=int, default=8)
    m.set_defaults(func=cmd_inspect_matching)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, BenchmarkError) as e:
        print(f"cycconf {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, CheckpointError, DatasetError, evalkit.EvaluationError, RuntimeError) as e:
        print(f"cycconf {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
