"""Bit-packed mask storage and the single-file compressed archive.

An archive holds the pre-trained checkpoint, the merged multi-task vector,
and one bit-packed mask per task; any task's model is rebuilt as
``pretrained + mask o mtl_vector``. File layout: magic "TLPK", u32 LE
version, then four u64-LE length-prefixed sections (JSON manifest,
pre-trained archive bytes, multi-task-vector archive bytes, concatenated
packed masks).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    BitCountMismatch,
    EmptyInput,
    IoError,
    KeyOrderMismatch,
    ManifestMismatch,
    NonZeroPadding,
)
from .merging import MergeConfig, ties_merge
from .synthetic import l1_scorer
from .tall_masks import Mask, masked_apply, tune_lambda
from .task_vectors import (
    MultiTaskVector,
    TrainableKeySpec,
    compute_task_vector,
    sum_task_vectors,
)
from .tensor_store import (
    TensorMap,
    _atomic_write_bytes,
    dump_archive_bytes,
    load_archive_bytes,
)

__all__ = [
    "PackedMask",
    "TallpackArchive",
    "pack_mask",
    "unpack_mask",
    "write_tallpack",
    "read_tallpack",
    "reconstruct",
    "reconstruct_task",
    "build_archive",
    "StorageRow",
    "StorageReport",
    "storage_report",
]

TLPK_MAGIC = b"TLPK"
TLPK_VERSION = 1


@dataclass(frozen=True)
class PackedMask:
    """One task's mask bits, LSB-first within each byte, zero-padded tail.

    Bits cover all trainable tensors concatenated in lexicographic name
    order, row-major within each tensor.
    """

    task_label: str
    packed_bytes: bytes
    bit_count: int

    def __post_init__(self):
        expected = (self.bit_count + 7) // 8
        if len(self.packed_bytes) != expected:
            raise BitCountMismatch(
                f"mask {self.task_label!r}: {len(self.packed_bytes)} bytes cannot hold "
                f"{self.bit_count} bits (expected {expected})"
            )
        pad = 8 * expected - self.bit_count
        if pad and self.packed_bytes and (self.packed_bytes[-1] >> (8 - pad)):
            raise NonZeroPadding(f"mask {self.task_label!r} has non-zero padding bits")


def pack_mask(mask: Mask, key_order: Sequence[str], task_label: str = "") -> PackedMask:
    """Pack mask bits into bytes; unpack_mask inverts this exactly."""
    if tuple(mask.keys()) != tuple(key_order):
        raise KeyOrderMismatch(
            f"mask keys {mask.keys()} do not match expected order {tuple(key_order)}"
        )
    flat = mask.concat()
    packed = np.packbits(flat.astype(np.uint8), bitorder="little").tobytes()
    return PackedMask(task_label=task_label, packed_bytes=packed, bit_count=flat.size)


def unpack_mask(packed: PackedMask, shapes: Mapping[str, Sequence[int]]) -> Mask:
    """Exact inverse of pack_mask for the given per-tensor shapes."""
    total = sum(int(np.prod(s, dtype=np.int64)) for s in shapes.values())
    if packed.bit_count != total:
        raise BitCountMismatch(
            f"mask {packed.task_label!r} holds {packed.bit_count} bits, "
            f"shapes need {total}"
        )
    raw = np.frombuffer(packed.packed_bytes, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    if np.any(bits[packed.bit_count :]):
        raise NonZeroPadding(f"mask {packed.task_label!r} has non-zero padding bits")
    return Mask.from_concat(bits[: packed.bit_count].astype(bool), shapes)


@dataclass(frozen=True)
class TallpackArchive:
    """In-memory form of the compressed container."""

    manifest: dict
    pretrained: TensorMap
    mtl_vector: MultiTaskVector
    masks: tuple[PackedMask, ...]

    def __post_init__(self):
        if not self.masks:
            raise EmptyInput("archive needs at least one task mask")
        trainable_bits = self.mtl_vector.tensors.total_elements
        for mask in self.masks:
            if mask.bit_count != trainable_bits:
                raise BitCountMismatch(
                    f"mask {mask.task_label!r} covers {mask.bit_count} bits, "
                    f"trainable tensors have {trainable_bits}"
                )
        labels = [m.task_label for m in self.masks]
        if self.manifest.get("task_labels") != labels or self.manifest.get("num_tasks") != len(labels):
            raise ManifestMismatch("manifest task list disagrees with the packed masks")

    @property
    def task_labels(self) -> tuple[str, ...]:
        return tuple(m.task_label for m in self.masks)

    def mask_for(self, task_label: str) -> Mask:
        for packed in self.masks:
            if packed.task_label == task_label:
                return unpack_mask(packed, self.mtl_vector.tensors.shapes())
        raise KeyError(f"no mask for task {task_label!r}; have {list(self.task_labels)}")


def _make_manifest(
    labels: Sequence[str],
    lambdas: Sequence[float],
    alpha: float,
    method: str,
    key_spec: TrainableKeySpec,
    pretrained: TensorMap,
    bit_count: int,
) -> dict:
    return {
        "format_version": TLPK_VERSION,
        "num_tasks": len(labels),
        "task_labels": list(labels),
        "lambda_per_task": {label: lam for label, lam in zip(labels, lambdas)},
        "alpha": alpha,
        "merge_method": method,
        "trainable_keys": list(key_spec.trainable),
        "frozen_keys": list(key_spec.frozen),
        "bit_count": bit_count,
        "tensors": {name: list(shape) for name, shape in pretrained.shapes().items()},
    }


def build_archive(
    pretrained: TensorMap,
    checkpoints: Sequence[TensorMap],
    labels: Sequence[str] | None = None,
    config: MergeConfig | None = None,
    key_spec: TrainableKeySpec | None = None,
    scorer_factory: Callable[[str, TensorMap], Callable[[TensorMap], float]] | None = None,
    threads: int = 1,
) -> TallpackArchive:
    """Compress a checkpoint collection into {pretrained, merged vector, masks}.

    The merged vector comes from plain summation or TIES per config.method;
    each task's lambda is tuned on its own scorer (default: negated L1
    distance to that task's checkpoint).
    """
    if not checkpoints:
        raise EmptyInput("need at least one checkpoint to compress")
    config = config or MergeConfig()
    if config.method not in ("task_arithmetic", "ties"):
        raise ValueError(
            f"compression merges with task_arithmetic or ties, got {config.method!r}"
        )
    if labels is None:
        labels = [f"task{i:02d}" for i in range(len(checkpoints))]
    if len(labels) != len(checkpoints):
        raise ValueError("labels and checkpoints must have equal length")
    if key_spec is None:
        key_spec = TrainableKeySpec.all_trainable(pretrained.keys())

    vectors = [
        compute_task_vector(ckpt, pretrained, key_spec, label)
        for ckpt, label in zip(checkpoints, labels)
    ]
    if config.method == "ties":
        mtl = ties_merge(vectors, config.ties_trim_fraction)
    else:
        mtl = sum_task_vectors(vectors)

    key_order = mtl.tensors.keys()
    lambdas: list[float] = []
    packed: list[PackedMask] = []
    for vec, ckpt, label in zip(vectors, checkpoints, labels):
        scorer = scorer_factory(label, ckpt) if scorer_factory else l1_scorer(ckpt)
        lam, mask = tune_lambda(
            vec, mtl, pretrained, config.lambda_grid, scorer, threads=threads
        )
        lambdas.append(lam)
        packed.append(pack_mask(mask, key_order, task_label=label))

    manifest = _make_manifest(
        labels, lambdas, 1.0, config.method, key_spec, pretrained, mtl.tensors.total_elements
    )
    return TallpackArchive(
        manifest=manifest, pretrained=pretrained, mtl_vector=mtl, masks=tuple(packed)
    )


def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8")


def write_tallpack(archive: TallpackArchive, path: str | os.PathLike) -> None:
    """Serialize the archive to a single file; read_tallpack is bit-exact."""
    sections = [
        _manifest_bytes(archive.manifest),
        dump_archive_bytes(archive.pretrained),
        dump_archive_bytes(archive.mtl_vector.tensors),
        b"".join(m.packed_bytes for m in archive.masks),
    ]
    blob = bytearray()
    blob += TLPK_MAGIC
    blob += struct.pack("<I", TLPK_VERSION)
    for section in sections:
        blob += struct.pack("<Q", len(section))
        blob += section
    _atomic_write_bytes(path, bytes(blob))


def read_tallpack(path: str | os.PathLike) -> TallpackArchive:
    """Parse an archive file, validating every declared size against the payload."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if len(buf) < 8 or buf[:4] != TLPK_MAGIC:
        raise ManifestMismatch("not a TLPK archive (bad magic)")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != TLPK_VERSION:
        raise ManifestMismatch(f"unsupported archive version {version}")

    sections: list[bytes] = []
    cursor = 8
    for _ in range(4):
        if cursor + 8 > len(buf):
            raise ManifestMismatch("archive ends inside a section header")
        (length,) = struct.unpack("<Q", buf[cursor : cursor + 8])
        cursor += 8
        if cursor + length > len(buf):
            raise ManifestMismatch("declared section length exceeds file size")
        sections.append(buf[cursor : cursor + length])
        cursor += length
    if cursor != len(buf):
        raise ManifestMismatch(f"{len(buf) - cursor} trailing bytes after the last section")

    try:
        manifest = json.loads(sections[0].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestMismatch(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ManifestMismatch("manifest must be a JSON object")

    pretrained = load_archive_bytes(sections[1])
    mtl_tensors = load_archive_bytes(sections[2])

    labels = manifest.get("task_labels")
    num_tasks = manifest.get("num_tasks")
    bit_count = manifest.get("bit_count")
    if not isinstance(labels, list) or not labels or num_tasks != len(labels):
        raise ManifestMismatch("manifest task labels are missing or inconsistent")
    if bit_count != mtl_tensors.total_elements:
        raise ManifestMismatch(
            f"manifest bit_count {bit_count} disagrees with the vector payload "
            f"({mtl_tensors.total_elements} scalars)"
        )
    trainable = manifest.get("trainable_keys")
    if trainable is not None and tuple(sorted(trainable)) != mtl_tensors.keys():
        raise ManifestMismatch("manifest trainable keys disagree with the vector payload")
    declared_shapes = manifest.get("tensors")
    if isinstance(declared_shapes, dict):
        actual = {name: list(shape) for name, shape in pretrained.shapes().items()}
        if declared_shapes != actual:
            raise ManifestMismatch("manifest tensor shapes disagree with the payload")

    bytes_per_mask = (bit_count + 7) // 8
    mask_blob = sections[3]
    if len(mask_blob) != bytes_per_mask * len(labels):
        raise ManifestMismatch(
            f"mask section holds {len(mask_blob)} bytes, expected "
            f"{bytes_per_mask * len(labels)} for {len(labels)} masks"
        )
    masks = tuple(
        PackedMask(
            task_label=label,
            packed_bytes=mask_blob[i * bytes_per_mask : (i + 1) * bytes_per_mask],
            bit_count=bit_count,
        )
        for i, label in enumerate(labels)
    )
    mtl = MultiTaskVector(tensors=mtl_tensors, num_source_tasks=len(labels))
    return TallpackArchive(manifest=manifest, pretrained=pretrained, mtl_vector=mtl, masks=masks)


def reconstruct(
    pretrained: TensorMap,
    tau_mtl: MultiTaskVector,
    mask: Mask,
    alpha: float = 1.0,
) -> TensorMap:
    """pretrained + mask o tau_mtl on trainable keys; frozen keys pass through.

    No scaling is applied by default; `alpha` exists for experimentation.
    """
    return masked_apply(pretrained, tau_mtl, mask, alpha=alpha)


def reconstruct_task(archive: TallpackArchive, task_label: str, alpha: float = 1.0) -> TensorMap:
    """Rebuild one task's checkpoint from the archive."""
    mask = archive.mask_for(task_label)
    return reconstruct(archive.pretrained, archive.mtl_vector, mask, alpha=alpha)


@dataclass(frozen=True)
class StorageRow:
    """Exact bit cost of keeping T task models under one storage scheme."""

    method: str
    bits: int
    lower_bound: bool = False

    @property
    def gigabits(self) -> float:
        return round(self.bits / 1e9, 1)


@dataclass(frozen=True)
class StorageReport:
    num_tasks: int
    trainable_params: int
    frozen_params: int
    rows: tuple[StorageRow, ...]

    def row(self, method: str) -> StorageRow:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(f"no storage row for {method!r}")

    def bits_for(self, method: str) -> int:
        return self.row(method).bits

    def to_rows(self) -> list[dict]:
        return [
            {
                "method": row.method,
                "bits": row.bits,
                "gigabits": row.gigabits,
                "lower_bound": row.lower_bound,
            }
            for row in self.rows
        ]


_SINGLE_MODEL_METHODS = (
    "zero_shot",
    "weight_averaging",
    "task_arithmetic",
    "ties",
    "consensus_ta",
    "consensus_ties",
)


def storage_report(num_tasks: int, trainable_params: int, frozen_params: int) -> StorageReport:
    """Bit costs per storage scheme at 32 bits per float parameter.

    Fine-tuned collection: 32(T*P' + F). Any single merged model: 32(P' + F).
    Mask-based schemes (this archive, magnitude masking): (64+T)P' + 32F,
    i.e. two dense float payloads plus one bit per trainable scalar per task.
    Magnitude pruning is reported at the same figure as a lower bound, since
    its index storage comes on top.
    """
    num_tasks = int(num_tasks)
    p_prime = int(round(trainable_params))
    frozen = int(round(frozen_params))
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if p_prime < 0 or frozen < 0:
        raise ValueError("parameter counts must be non-negative")

    fine_tuned = 32 * (num_tasks * p_prime + frozen)
    single = 32 * (p_prime + frozen)
    masked = (64 + num_tasks) * p_prime + 32 * frozen

    rows = [StorageRow("fine_tuned", fine_tuned)]
    rows += [StorageRow(method, single) for method in _SINGLE_MODEL_METHODS]
    rows += [
        StorageRow("tall_masks", masked),
        StorageRow("magnitude_masking", masked),
        StorageRow("magnitude_pruning", masked, lower_bound=True),
    ]
    return StorageReport(
        num_tasks=num_tasks,
        trainable_params=p_prime,
        frozen_params=frozen,
        rows=tuple(rows),
    )
