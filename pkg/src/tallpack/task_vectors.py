"""Task-vector algebra: residual extraction, summation, scaled application."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fnmatch import fnmatchcase
from typing import Sequence, Union

import numpy as np

from .errors import EmptyInput, FrozenKeyModified, IncompatibleShapes
from .tensor_store import TensorMap, ensure_compatible

__all__ = [
    "TrainableKeySpec",
    "TaskVector",
    "MultiTaskVector",
    "compute_task_vector",
    "sum_task_vectors",
    "apply_vector",
]


@dataclass(frozen=True)
class TrainableKeySpec:
    """Partition of a checkpoint's tensor names into trainable and frozen."""

    trainable: tuple[str, ...]
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trainable", tuple(sorted(self.trainable)))
        object.__setattr__(self, "frozen", tuple(sorted(self.frozen)))
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise ValueError(f"keys both trainable and frozen: {sorted(overlap)}")
        if not self.trainable:
            raise ValueError("at least one trainable key is required")

    @classmethod
    def all_trainable(cls, keys: Sequence[str]) -> "TrainableKeySpec":
        return cls(trainable=tuple(keys))

    @classmethod
    def from_frozen_patterns(cls, keys: Sequence[str], patterns: Sequence[str]) -> "TrainableKeySpec":
        """Freeze every key matching any glob pattern; the rest are trainable."""
        frozen = tuple(k for k in keys if any(fnmatchcase(k, p) for p in patterns))
        trainable = tuple(k for k in keys if k not in set(frozen))
        return cls(trainable=trainable, frozen=frozen)

    def validate_against(self, keys: Sequence[str]) -> None:
        declared = set(self.trainable) | set(self.frozen)
        actual = set(keys)
        if declared != actual:
            extra = sorted(declared - actual)
            missing = sorted(actual - declared)
            raise ValueError(
                f"key spec does not partition the checkpoint keys "
                f"(unknown: {extra}, uncovered: {missing})"
            )

    def param_counts(self, checkpoint: TensorMap) -> tuple[int, int]:
        """(trainable, frozen) scalar counts for a checkpoint; feeds storage accounting."""
        self.validate_against(checkpoint.keys())
        trainable = sum(checkpoint[name].size for name in self.trainable)
        return trainable, checkpoint.total_elements - trainable


@dataclass(frozen=True)
class TaskVector:
    """Residual between a fine-tuned checkpoint and the pre-trained model,
    restricted to trainable tensors."""

    tensors: TensorMap
    source_label: str = ""

    def keys(self) -> tuple[str, ...]:
        return self.tensors.keys()

    @property
    def total_elements(self) -> int:
        return self.tensors.total_elements


@dataclass(frozen=True)
class MultiTaskVector:
    """Aggregate of several task vectors over an identical key set."""

    tensors: TensorMap
    num_source_tasks: int

    def __post_init__(self):
        if self.num_source_tasks < 1:
            raise ValueError("num_source_tasks must be >= 1")

    def keys(self) -> tuple[str, ...]:
        return self.tensors.keys()


VectorLike = Union[TaskVector, MultiTaskVector]


def compute_task_vector(
    finetuned: TensorMap,
    pretrained: TensorMap,
    spec: TrainableKeySpec | None = None,
    label: str = "",
) -> TaskVector:
    """Elementwise finetuned - pretrained over trainable keys.

    Frozen keys are verified bit-identical between the two checkpoints and
    excluded from the result.
    """
    ensure_compatible(finetuned, pretrained, "task vector")
    if spec is None:
        spec = TrainableKeySpec.all_trainable(pretrained.keys())
    spec.validate_against(pretrained.keys())

    for name in spec.frozen:
        if finetuned[name].tobytes() != pretrained[name].tobytes():
            raise FrozenKeyModified(f"frozen tensor {name!r} differs between checkpoints")

    diffs = {name: finetuned[name] - pretrained[name] for name in spec.trainable}
    return TaskVector(tensors=TensorMap._from_trusted(diffs), source_label=label)


def sum_task_vectors(vectors: Sequence[TaskVector]) -> MultiTaskVector:
    """Elementwise float32 sum, accumulated sequentially in list order."""
    if not vectors:
        raise EmptyInput("need at least one task vector")
    first = vectors[0].tensors
    acc = {name: arr.copy() for name, arr in first.items()}
    for vec in vectors[1:]:
        if vec.tensors.keys() != first.keys():
            raise IncompatibleShapes(
                f"key sets differ: {first.keys()} vs {vec.tensors.keys()}"
            )
        ensure_compatible(first, vec.tensors, "summation")
        for name in acc:
            acc[name] += vec.tensors[name]
    return MultiTaskVector(tensors=TensorMap._from_trusted(acc), num_source_tasks=len(vectors))


def apply_vector(pretrained: TensorMap, vector: VectorLike, alpha: float) -> TensorMap:
    """pretrained + alpha * vector on the vector's keys; other keys pass through."""
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    vt = vector.tensors
    missing = [name for name in vt if name not in pretrained]
    if missing:
        raise IncompatibleShapes(f"vector keys absent from checkpoint: {missing}")
    bad = [name for name in vt if pretrained[name].shape != vt[name].shape]
    if bad:
        raise IncompatibleShapes(f"shape mismatch on: {bad}")

    if alpha == 0.0:
        return pretrained.subset(pretrained.keys())
    scale = np.float32(alpha)
    out: dict[str, np.ndarray] = {}
    for name, base in pretrained.items():
        if name in vt:
            out[name] = base + scale * vt[name] if alpha != 1.0 else base + vt[name]
        else:
            out[name] = base
    return TensorMap._from_trusted(out)
