"""Command-line front end: merge, mask, compress, reconstruct, stats, storage, synth."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .baselines import DEFAULT_MASK_FRACTION, magnitude_mask
from .compression import (
    build_archive,
    read_tallpack,
    reconstruct_task,
    storage_report,
    write_tallpack,
)
from .errors import TallpackError, UsageError
from .merging import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_CONSENSUS_K,
    DEFAULT_TIES_TRIM_FRACTION,
    MERGE_METHODS,
    MergeConfig,
    merge_checkpoints,
    ties_merge,
)
from .synthetic import SyntheticSpec, gen_disjoint_tasks, gen_overlapping_tasks, l1_scorer
from .tall_masks import DEFAULT_LAMBDA_GRID, MaskSet, classify_weights, tune_lambda
from .task_vectors import TrainableKeySpec, compute_task_vector, sum_task_vectors
from .tensor_store import _atomic_write_bytes, load_archive, save_archive


def _configure_logging() -> None:
    level = os.environ.get("TALLPACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tallpack",
        description=(
            "Merge fine-tuned checkpoints in weight space and compress a "
            "collection into one archive of pre-trained weights, a merged "
            "task vector, and per-task bit-packed masks."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_inputs(p: argparse.ArgumentParser) -> None:
        p.add_argument("--pretrained", required=True, help="pre-trained checkpoint archive")
        p.add_argument("--checkpoints", nargs="+", required=True, help="fine-tuned checkpoint archives")
        p.add_argument("--frozen-keys", nargs="*", default=None, metavar="GLOB",
                       help="tensor-name globs excluded from task vectors")
        p.add_argument("--config", default=None, help="JSON config file (CLI flags win)")
        p.add_argument("--threads", type=int, default=None, help="worker threads for per-task/grid work")

    p_merge = sub.add_parser("merge", help="merge checkpoints into one model")
    add_common_inputs(p_merge)
    p_merge.add_argument("--method", choices=MERGE_METHODS, default=None)
    p_merge.add_argument("--alpha", type=float, default=None, help="fixed scaling factor")
    p_merge.add_argument("--alpha-grid", type=float, nargs="+", default=None,
                         help="candidate scaling factors to tune over")
    p_merge.add_argument("--lambda-grid", type=float, nargs="+", default=None)
    p_merge.add_argument("--k", type=int, default=None, help="consensus threshold")
    p_merge.add_argument("--trim-fraction", type=float, default=None)
    p_merge.add_argument("--out", required=True)

    def add_mask_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--method", choices=("task_arithmetic", "ties"), default=None)
        p.add_argument("--lambda-grid", type=float, nargs="+", default=None)
        p.add_argument("--trim-fraction", type=float, default=None)
        p.add_argument("--mask-type", choices=("tall", "magnitude"), default=None,
                       help="task-localization masks (default) or top-|value| baseline masks")
        p.add_argument("--fraction", type=float, default=None,
                       help="top fraction kept by magnitude masks (default 0.10)")
        p.add_argument("--format", choices=("csv", "json"), default="json")
        p.add_argument("--out", default=None, help="output file (stdout if omitted)")

    p_mask = sub.add_parser("mask", help="build per-task masks and report their stats")
    add_common_inputs(p_mask)
    add_mask_options(p_mask)

    p_compress = sub.add_parser("compress", help="pack checkpoints into a .tlpk archive")
    add_common_inputs(p_compress)
    p_compress.add_argument("--method", choices=("task_arithmetic", "ties"), default=None)
    p_compress.add_argument("--lambda-grid", type=float, nargs="+", default=None)
    p_compress.add_argument("--trim-fraction", type=float, default=None)
    p_compress.add_argument("--out", required=True)

    p_recon = sub.add_parser("reconstruct", help="rebuild one task's model from an archive")
    p_recon.add_argument("archive", help=".tlpk archive path")
    p_recon.add_argument("--task", required=True, help="task label to rebuild")
    p_recon.add_argument("--alpha", type=float, default=1.0,
                         help="experimental scaling of the masked vector (default 1.0)")
    p_recon.add_argument("--out", required=True)

    p_stats = sub.add_parser("stats", help="mask-agreement histogram and weight taxonomy")
    add_common_inputs(p_stats)
    add_mask_options(p_stats)

    p_storage = sub.add_parser("storage", help="storage cost table per scheme")
    p_storage.add_argument("--T", type=int, required=True, help="number of tasks")
    p_storage.add_argument("--p-prime", type=float, required=True, help="trainable parameter count")
    p_storage.add_argument("--frozen", type=float, default=0.0, help="frozen parameter count")
    p_storage.add_argument("--format", choices=("csv", "json", "table"), default="table")
    p_storage.add_argument("--out", default=None)

    p_synth = sub.add_parser("synth", help="generate a synthetic checkpoint collection")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--p", type=int, default=8000, help="total scalar count")
    p_synth.add_argument("--tasks", type=int, default=4)
    p_synth.add_argument("--mode", choices=("disjoint", "overlapping"), default="disjoint")
    p_synth.add_argument("--overlap-fraction", type=float, default=0.5)
    p_synth.add_argument("--value-scale", type=float, default=1.0)
    p_synth.add_argument("--tensors", type=int, default=1, help="split scalars over this many tensors")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--with-supports", action="store_true",
                         help="also write ground-truth support indices")

    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _pick(cli_value, cfg: dict, key: str, default):
    if cli_value is not None:
        return cli_value
    if key in cfg:
        return cfg[key]
    return default


def _merge_config_from_args(args, cfg: dict) -> MergeConfig:
    alpha = _pick(getattr(args, "alpha", None), cfg, "alpha", None)
    return MergeConfig(
        method=_pick(getattr(args, "method", None), cfg, "method", "task_arithmetic"),
        alpha=alpha,
        alpha_grid=tuple(_pick(getattr(args, "alpha_grid", None), cfg, "alpha_grid", DEFAULT_ALPHA_GRID)),
        consensus_k=int(_pick(getattr(args, "k", None), cfg, "k", DEFAULT_CONSENSUS_K)),
        ties_trim_fraction=float(
            _pick(getattr(args, "trim_fraction", None), cfg, "trim_fraction", DEFAULT_TIES_TRIM_FRACTION)
        ),
        lambda_grid=tuple(_pick(getattr(args, "lambda_grid", None), cfg, "lambda_grid", DEFAULT_LAMBDA_GRID)),
    )


def _load_inputs(args, cfg: dict):
    pretrained = load_archive(args.pretrained)
    paths = [Path(p) for p in args.checkpoints]
    checkpoints = [load_archive(p) for p in paths]
    labels: list[str] = []
    for i, path in enumerate(paths):
        stem = path.stem
        labels.append(stem if stem not in labels else f"{stem}_{i}")
    patterns = _pick(args.frozen_keys, cfg, "frozen_keys", None)
    if patterns:
        key_spec = TrainableKeySpec.from_frozen_patterns(pretrained.keys(), patterns)
    else:
        key_spec = None
    threads = int(_pick(args.threads, cfg, "threads", 1))
    return pretrained, checkpoints, labels, key_spec, threads


def _emit(text: str, out_path: str | None) -> None:
    if out_path is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        _atomic_write_bytes(out_path, text.encode("utf-8"))


def _rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _cmd_merge(args) -> int:
    cfg = _load_config_file(args.config)
    pretrained, checkpoints, labels, key_spec, threads = _load_inputs(args, cfg)
    config = _merge_config_from_args(args, cfg)
    result = merge_checkpoints(
        pretrained, checkpoints, labels=labels, config=config, key_spec=key_spec, threads=threads
    )
    save_archive(result.merged, args.out)
    sidecar = dict(result.metadata(), checkpoints=[str(p) for p in args.checkpoints])
    _atomic_write_bytes(args.out + ".meta.json", json.dumps(sidecar, indent=2).encode("utf-8"))
    print(f"wrote merged checkpoint to {args.out} (method={result.method}, alpha={result.alpha})")
    return 0


def _build_masks(args, cfg: dict):
    """Per-task masks plus ("lambda"|"fraction", value-per-entry) for reporting."""
    pretrained, checkpoints, labels, key_spec, threads = _load_inputs(args, cfg)
    config = _merge_config_from_args(args, cfg)
    if config.method not in ("task_arithmetic", "ties"):
        raise UsageError("mask construction merges with task_arithmetic or ties")
    vectors = [
        compute_task_vector(ckpt, pretrained, key_spec, label)
        for ckpt, label in zip(checkpoints, labels)
    ]

    mask_type = _pick(getattr(args, "mask_type", None), cfg, "mask_type", "tall")
    if mask_type == "magnitude":
        fraction = float(_pick(getattr(args, "fraction", None), cfg, "fraction", DEFAULT_MASK_FRACTION))
        maskset = MaskSet.build(
            labels, [magnitude_mask(vec, fraction) for vec in vectors]
        )
        return maskset, "fraction", [fraction] * len(labels)

    if config.method == "ties":
        mtl = ties_merge(vectors, config.ties_trim_fraction)
    else:
        mtl = sum_task_vectors(vectors)
    entries = []
    for vec, ckpt in zip(vectors, checkpoints):
        lam, mask = tune_lambda(
            vec, mtl, pretrained, config.lambda_grid, l1_scorer(ckpt), threads=threads
        )
        entries.append((vec.source_label, lam, mask))
    maskset = MaskSet.build(
        [e[0] for e in entries], [e[2] for e in entries], [e[1] for e in entries]
    )
    return maskset, "lambda", [e[1] for e in entries]


def _cmd_mask(args) -> int:
    cfg = _load_config_file(args.config)
    maskset, param_name, params = _build_masks(args, cfg)
    rows = [
        {
            "task": entry.task_label,
            param_name: param,
            "density": entry.mask.density,
            "ones": entry.mask.ones,
            "bit_count": entry.mask.bit_count,
        }
        for entry, param in zip(maskset.entries, params)
    ]
    if args.format == "csv":
        _emit(_rows_to_csv(rows), args.out)
    else:
        mask_type = "magnitude" if param_name == "fraction" else "tall"
        _emit(json.dumps({"mask_type": mask_type, "masks": rows}, indent=2), args.out)
    return 0


def _cmd_compress(args) -> int:
    cfg = _load_config_file(args.config)
    pretrained, checkpoints, labels, key_spec, threads = _load_inputs(args, cfg)
    config = _merge_config_from_args(args, cfg)
    if config.method not in ("task_arithmetic", "ties"):
        raise UsageError("compression merges with task_arithmetic or ties")
    archive = build_archive(
        pretrained, checkpoints, labels=labels, config=config, key_spec=key_spec, threads=threads
    )
    write_tallpack(archive, args.out)
    print(
        f"wrote archive to {args.out} "
        f"({archive.manifest['num_tasks']} tasks, method={archive.manifest['merge_method']})"
    )
    return 0


def _cmd_reconstruct(args) -> int:
    archive = read_tallpack(args.archive)
    if args.task not in archive.task_labels:
        raise UsageError(
            f"unknown task {args.task!r}; archive holds {list(archive.task_labels)}"
        )
    rebuilt = reconstruct_task(archive, args.task, alpha=args.alpha)
    save_archive(rebuilt, args.out)
    print(f"wrote reconstruction for {args.task!r} to {args.out}")
    return 0


def _cmd_stats(args) -> int:
    cfg = _load_config_file(args.config)
    maskset, _, _ = _build_masks(args, cfg)
    taxonomy = classify_weights(maskset)
    rows = taxonomy.to_rows()
    if args.format == "csv":
        _emit(_rows_to_csv(rows), args.out)
    else:
        payload = {
            "num_tasks": taxonomy.num_tasks,
            "trainable_scalars": taxonomy.total,
            "buckets": {
                "catastrophic": taxonomy.catastrophic,
                "selfish": taxonomy.selfish,
                "general": taxonomy.general,
                "universal": taxonomy.universal,
            },
            "histogram": rows,
        }
        _emit(json.dumps(payload, indent=2), args.out)
    return 0


def _cmd_storage(args) -> int:
    report = storage_report(args.T, args.p_prime, args.frozen)
    rows = report.to_rows()
    if args.format == "json":
        _emit(json.dumps({"rows": rows}, indent=2), args.out)
    elif args.format == "csv":
        _emit(_rows_to_csv(rows), args.out)
    else:
        width = max(len(r["method"]) for r in rows)
        lines = [f"{'method'.ljust(width)}  {'bits':>16}  {'Gb':>8}"]
        for row in rows:
            marker = ">" if row["lower_bound"] else " "
            lines.append(
                f"{row['method'].ljust(width)}  {row['bits']:>16d}  {marker}{row['gigabits']:>7.1f}"
            )
        _emit("\n".join(lines), args.out)
    return 0


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        total_params=args.p,
        num_tasks=args.tasks,
        seed=args.seed,
        mode=args.mode,
        overlap_fraction=args.overlap_fraction,
        value_scale=args.value_scale,
        num_tensors=args.tensors,
    )
    if spec.mode == "disjoint":
        pretrained, finetuned, supports = gen_disjoint_tasks(spec)
    else:
        pretrained, finetuned, supports = gen_overlapping_tasks(spec)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_archive(pretrained, out_dir / "pretrained.safetensors")
    labels = [f"task{i:02d}" for i in range(len(finetuned))]
    for label, ckpt in zip(labels, finetuned):
        save_archive(ckpt, out_dir / f"{label}.safetensors")
    fixture = {
        "total_params": spec.total_params,
        "num_tasks": spec.num_tasks,
        "seed": spec.seed,
        "mode": spec.mode,
        "overlap_fraction": spec.overlap_fraction,
        "value_scale": spec.value_scale,
        "num_tensors": spec.num_tensors,
        "pretrained": "pretrained.safetensors",
        "tasks": {label: f"{label}.safetensors" for label in labels},
    }
    if args.with_supports:
        fixture["supports"] = {
            label: [int(i) for i in support] for label, support in zip(labels, supports)
        }
    _atomic_write_bytes(out_dir / "fixture.json", json.dumps(fixture, indent=2).encode("utf-8"))
    print(f"wrote {len(finetuned)} checkpoints plus pretrained to {out_dir}")
    return 0


_COMMANDS = {
    "merge": _cmd_merge,
    "mask": _cmd_mask,
    "compress": _cmd_compress,
    "reconstruct": _cmd_reconstruct,
    "stats": _cmd_stats,
    "storage": _cmd_storage,
    "synth": _cmd_synth,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    _configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except TallpackError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
