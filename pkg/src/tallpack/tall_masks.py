"""Per-task binary masks localizing task information in a multi-task vector.

A mask keeps the coordinates of the merged vector that best reproduce one
task's residual in L1 distance; the selection rule is
``|tau_t| >= lambda_t * |tau_mtl - tau_t|`` with ties choosing 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from ._parallel import parallel_map
from .errors import EmptyGrid, EmptyInput, IncompatibleShapes, NonPositiveLambda, OutOfRangeN
from .task_vectors import MultiTaskVector, TaskVector
from .tensor_store import TensorMap

__all__ = [
    "Mask",
    "MaskEntry",
    "MaskSet",
    "WeightTaxonomy",
    "build_tall_mask",
    "oracle_mask",
    "mask_agreement",
    "classify_weights",
    "tune_lambda",
]

DEFAULT_LAMBDA_GRID = (0.2, 0.3, 0.4, 0.5, 0.6)


class Mask:
    """Per-tensor boolean selection, one flag per scalar, keys sorted."""

    __slots__ = ("_bits",)

    def __init__(self, bits: Mapping[str, np.ndarray]):
        items: dict[str, np.ndarray] = {}
        for name in sorted(bits):
            arr = np.asarray(bits[name], dtype=bool, order="C")
            if arr is bits[name] or not arr.flags.c_contiguous:
                arr = arr.copy(order="C")
            arr.flags.writeable = False
            items[name] = arr
        self._bits = items

    @classmethod
    def _from_trusted(cls, bits: dict[str, np.ndarray]) -> "Mask":
        obj = cls.__new__(cls)
        for arr in bits.values():
            arr.flags.writeable = False
        obj._bits = bits
        return obj

    @classmethod
    def from_concat(cls, flat: np.ndarray, shapes: Mapping[str, Sequence[int]]) -> "Mask":
        """Split a flat bit array back into per-tensor arrays, in key order."""
        flat = np.asarray(flat, dtype=bool).ravel()
        total = sum(int(np.prod(shape, dtype=np.int64)) for shape in shapes.values())
        if flat.size != total:
            raise IncompatibleShapes(f"flat mask has {flat.size} bits, shapes need {total}")
        bits: dict[str, np.ndarray] = {}
        cursor = 0
        for name in sorted(shapes):
            count = int(np.prod(shapes[name], dtype=np.int64))
            bits[name] = flat[cursor : cursor + count].reshape(tuple(shapes[name])).copy()
            cursor += count
        return cls._from_trusted(bits)

    def keys(self) -> tuple[str, ...]:
        return tuple(self._bits)

    def items(self):
        return self._bits.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._bits.items()}

    def concat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for arr in self._bits.values()])

    @property
    def bit_count(self) -> int:
        return sum(arr.size for arr in self._bits.values())

    @property
    def ones(self) -> int:
        return int(sum(arr.sum(dtype=np.int64) for arr in self._bits.values()))

    @property
    def density(self) -> float:
        total = self.bit_count
        return self.ones / total if total else 0.0

    def subset_of(self, other: "Mask") -> bool:
        if self.keys() != other.keys():
            return False
        return all(not np.any(arr & ~other._bits[name]) for name, arr in self._bits.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._bits[name]

    def __contains__(self, name: str) -> bool:
        return name in self._bits

    def __len__(self) -> int:
        return len(self._bits)

    def __iter__(self) -> Iterator[str]:
        return iter(self._bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        if self.keys() != other.keys():
            return False
        return all(
            arr.shape == other._bits[name].shape and np.array_equal(arr, other._bits[name])
            for name, arr in self._bits.items()
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Mask({len(self._bits)} tensors, density={self.density:.4f})"


@dataclass(frozen=True)
class MaskEntry:
    task_label: str
    mask: Mask
    lambda_used: float


@dataclass(frozen=True)
class MaskSet:
    """Ordered per-task masks over one shared key set."""

    entries: tuple[MaskEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise EmptyInput("mask set needs at least one entry")
        first = self.entries[0].mask
        for entry in self.entries[1:]:
            if entry.mask.keys() != first.keys() or entry.mask.shapes() != first.shapes():
                raise IncompatibleShapes(
                    f"mask for task {entry.task_label!r} has a different layout"
                )

    @classmethod
    def build(
        cls,
        labels: Sequence[str],
        masks: Sequence[Mask],
        lambdas: Sequence[float] | None = None,
    ) -> "MaskSet":
        if lambdas is None:
            lambdas = [float("nan")] * len(masks)
        if not (len(labels) == len(masks) == len(lambdas)):
            raise ValueError("labels, masks, and lambdas must have equal length")
        return cls(tuple(MaskEntry(l, m, lam) for l, m, lam in zip(labels, masks, lambdas)))

    @property
    def num_tasks(self) -> int:
        return len(self.entries)

    @property
    def key_order(self) -> tuple[str, ...]:
        return self.entries[0].mask.keys()

    @property
    def bit_count(self) -> int:
        return self.entries[0].mask.bit_count

    def labels(self) -> tuple[str, ...]:
        return tuple(e.task_label for e in self.entries)

    def masks(self) -> tuple[Mask, ...]:
        return tuple(e.mask for e in self.entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return self.entries[0].mask.shapes()

    def coordinate_counts(self) -> np.ndarray:
        """Per-scalar count of masks selecting it, flattened in key order."""
        counts = np.zeros(self.bit_count, dtype=np.int64)
        for entry in self.entries:
            counts += entry.mask.concat()
        return counts

    def agreement_counts(self) -> np.ndarray:
        """Histogram over n = 0..T of scalars selected by exactly n masks."""
        return np.bincount(self.coordinate_counts(), minlength=self.num_tasks + 1)


@dataclass(frozen=True)
class WeightTaxonomy:
    """Counts of scalars selected by exactly n of the T masks, n = 0..T."""

    counts: tuple[int, ...]
    num_tasks: int

    def __post_init__(self):
        if len(self.counts) != self.num_tasks + 1:
            raise ValueError("need one count per agreement level 0..T")

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def catastrophic(self) -> int:
        return self.counts[0]

    @property
    def selfish(self) -> int:
        return self.counts[1] if self.num_tasks >= 1 else 0

    @property
    def general(self) -> int:
        return sum(self.counts[2:])

    @property
    def universal(self) -> int:
        return self.counts[self.num_tasks]

    def fraction(self, n: int) -> float:
        return self.counts[n] / self.total

    def to_rows(self) -> list[dict]:
        return [
            {"n": n, "count": count, "fraction": count / self.total}
            for n, count in enumerate(self.counts)
        ]


def _paired_arrays(tau_t: TaskVector, tau_mtl: MultiTaskVector):
    a, b = tau_t.tensors, tau_mtl.tensors
    if a.keys() != b.keys():
        raise IncompatibleShapes(f"key sets differ: {a.keys()} vs {b.keys()}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise IncompatibleShapes(f"shape mismatch on {name!r}")
    return ((name, a[name], b[name]) for name in a)


def build_tall_mask(tau_t: TaskVector, tau_mtl: MultiTaskVector, lambda_t: float) -> Mask:
    """Select coordinates where |tau_t| >= lambda_t * |tau_mtl - tau_t|."""
    if not (lambda_t > 0 and math.isfinite(lambda_t)):
        raise NonPositiveLambda(f"lambda must be positive and finite, got {lambda_t}")
    lam = np.float32(lambda_t)
    bits = {
        name: np.abs(t) >= lam * np.abs(m - t)
        for name, t, m in _paired_arrays(tau_t, tau_mtl)
    }
    return Mask._from_trusted(bits)


def oracle_mask(tau_t: TaskVector, tau_mtl: MultiTaskVector) -> Mask:
    """Per-coordinate argmin over m in {0,1} of |m*tau_mtl - tau_t|, ties -> 1.

    Evaluates both candidate costs explicitly; must agree bit-for-bit with
    build_tall_mask at lambda = 1.
    """
    bits = {}
    for name, t, m in _paired_arrays(tau_t, tau_mtl):
        cost_keep = np.abs(np.float32(1.0) * m - t)
        cost_drop = np.abs(np.float32(0.0) * m - t)
        bits[name] = cost_keep <= cost_drop
    return Mask._from_trusted(bits)


def mask_agreement(masks: MaskSet, n: int) -> float:
    """Fraction of trainable scalars selected by exactly n of the T masks."""
    if not (0 <= n <= masks.num_tasks):
        raise OutOfRangeN(f"n must be in [0, {masks.num_tasks}], got {n}")
    counts = masks.agreement_counts()
    return int(counts[n]) / masks.bit_count


def classify_weights(masks: MaskSet) -> WeightTaxonomy:
    """Bucket scalars by how many masks select them (0..T)."""
    counts = masks.agreement_counts()
    return WeightTaxonomy(counts=tuple(int(c) for c in counts), num_tasks=masks.num_tasks)


def masked_apply(
    pretrained: TensorMap,
    tau_mtl: MultiTaskVector,
    mask: Mask,
    alpha: float = 1.0,
) -> TensorMap:
    """pretrained + alpha * (mask o tau_mtl); unselected scalars pass through bit-exactly."""
    vt = tau_mtl.tensors
    if mask.keys() != vt.keys() or mask.shapes() != vt.shapes():
        raise IncompatibleShapes("mask layout does not match the vector")
    missing = [name for name in vt if name not in pretrained]
    if missing:
        raise IncompatibleShapes(f"vector keys absent from checkpoint: {missing}")
    scale = np.float32(alpha)
    out: dict[str, np.ndarray] = {}
    for name, base in pretrained.items():
        if name in vt:
            if base.shape != vt[name].shape:
                raise IncompatibleShapes(f"shape mismatch on {name!r}")
            delta = vt[name] if alpha == 1.0 else scale * vt[name]
            out[name] = np.where(mask[name], base + delta, base)
        else:
            out[name] = base
    return TensorMap._from_trusted(out)


def tune_lambda(
    tau_t: TaskVector,
    tau_mtl: MultiTaskVector,
    pretrained: TensorMap,
    grid: Sequence[float],
    scorer: Callable[[TensorMap], float],
    threads: int = 1,
) -> tuple[float, Mask]:
    """Pick the grid value whose mask-reconstruction scores highest.

    Each grid point is evaluated independently; ties break toward the
    largest lambda (the sparsest mask).
    """
    if not grid:
        raise EmptyGrid("lambda grid is empty")
    for lam in grid:
        if not (lam > 0 and math.isfinite(lam)):
            raise NonPositiveLambda(f"lambda grid contains invalid value {lam}")

    def evaluate(lam: float) -> tuple[float, Mask]:
        mask = build_tall_mask(tau_t, tau_mtl, lam)
        return float(scorer(masked_apply(pretrained, tau_mtl, mask))), mask

    lams = sorted(set(float(l) for l in grid), reverse=True)
    workers = threads if not getattr(scorer, "serial", True) else 1
    results = parallel_map(evaluate, lams, workers)

    best_lam, (best_score, best_mask) = lams[0], results[0]
    for lam, (score, mask) in zip(lams[1:], results[1:]):
        if score > best_score:
            best_lam, best_score, best_mask = lam, score, mask
    return best_lam, best_mask
