"""Synthetic checkpoint collections and weight-space scoring.

The generators emit values on a dyadic lattice (multiples of a power-of-two
step) so that every subtraction, summation, and reconstruction performed on
them is exact in float32; support-recovery tests can then assert bit
equality instead of tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import IndivisibleP, LengthMismatch, ZeroDenominator
from .tall_masks import Mask
from .tensor_store import TensorMap

__all__ = [
    "Scorer",
    "SyntheticSpec",
    "gen_disjoint_tasks",
    "gen_overlapping_tasks",
    "support_indicator",
    "normalized_accuracy",
    "l1_scorer",
]

_LATTICE_STEPS = 1024  # lattice resolution per power-of-two bracket
_MIN_DELTA_FRACTION = 1e-3  # rejection bound: |delta| >= this fraction of value_scale


@dataclass(frozen=True)
class Scorer:
    """Deterministic callback scoring a candidate checkpoint (higher is better).

    `serial` marks scorers that must not be invoked from multiple threads.
    """

    name: str
    fn: Callable[[TensorMap], float]
    serial: bool = False

    def __call__(self, candidate: TensorMap) -> float:
        return self.fn(candidate)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for generating a synthetic checkpoint collection."""

    total_params: int
    num_tasks: int
    seed: int = 0
    mode: str = "disjoint"
    overlap_fraction: float = 0.5
    value_scale: float = 1.0
    num_tensors: int = 1

    def __post_init__(self):
        if self.total_params < 1:
            raise ValueError("total_params must be >= 1")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if self.mode not in ("disjoint", "overlapping"):
            raise ValueError(f"mode must be disjoint or overlapping, got {self.mode!r}")
        if not (0.0 <= self.overlap_fraction <= 1.0):
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if not (self.value_scale > 0 and math.isfinite(self.value_scale)):
            raise ValueError("value_scale must be positive and finite")
        if not (1 <= self.num_tensors <= self.total_params):
            raise ValueError("num_tensors must be in [1, total_params]")


def _lattice_unit(value_scale: float) -> float:
    # power-of-two step: sums of <= ~2^13 lattice values stay exactly
    # representable in float32, which keeps recovery bit-exact
    bracket = math.ceil(math.log2(value_scale))
    return 2.0 ** (bracket - int(math.log2(_LATTICE_STEPS)))


def _tensor_shapes(spec: SyntheticSpec) -> dict[str, tuple[int, ...]]:
    if spec.num_tensors == 1:
        return {"w": (spec.total_params,)}
    base, extra = divmod(spec.total_params, spec.num_tensors)
    return {
        f"block{i:02d}.w": (base + (1 if i < extra else 0),)
        for i in range(spec.num_tensors)
    }


def _split_flat(flat: np.ndarray, shapes: dict[str, tuple[int, ...]]) -> TensorMap:
    out: dict[str, np.ndarray] = {}
    cursor = 0
    for name in sorted(shapes):
        count = int(np.prod(shapes[name], dtype=np.int64))
        out[name] = flat[cursor : cursor + count].reshape(shapes[name]).copy()
        cursor += count
    return TensorMap._from_trusted(out)


def _base_values(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    unit = _lattice_unit(spec.value_scale)
    k_max = math.floor(spec.value_scale / unit)
    steps = rng.integers(-k_max, k_max + 1, size=spec.total_params)
    return (steps.astype(np.float64) * unit).astype(np.float32)


def _delta_values(rng: np.random.Generator, spec: SyntheticSpec, size: int) -> np.ndarray:
    unit = _lattice_unit(spec.value_scale)
    k_max = math.floor(spec.value_scale / unit)
    k_min = max(1, math.ceil(_MIN_DELTA_FRACTION * spec.value_scale / unit))
    magnitudes = rng.integers(k_min, k_max + 1, size=size)
    signs = rng.integers(0, 2, size=size) * 2 - 1
    return ((magnitudes * signs).astype(np.float64) * unit).astype(np.float32)


def _materialize(
    rng: np.random.Generator, spec: SyntheticSpec, supports: list[np.ndarray]
) -> tuple[TensorMap, list[TensorMap], list[np.ndarray]]:
    shapes = _tensor_shapes(spec)
    base = _base_values(rng, spec)
    pretrained = _split_flat(base, shapes)
    finetuned = []
    for support in supports:
        flat = base.copy()
        flat[support] = flat[support] + _delta_values(rng, spec, support.size)
        finetuned.append(_split_flat(flat, shapes))
    return pretrained, finetuned, supports


def gen_disjoint_tasks(
    spec: SyntheticSpec,
) -> tuple[TensorMap, list[TensorMap], list[np.ndarray]]:
    """Controlled fixture: task supports partition the index space equally.

    Each task's checkpoint differs from the pre-trained values exactly on its
    block; returns (pretrained, finetuned checkpoints, sorted support index
    arrays) so tests can check recovery against ground truth.
    """
    if spec.mode != "disjoint":
        raise ValueError(f"spec mode is {spec.mode!r}, expected 'disjoint'")
    if spec.total_params % spec.num_tasks != 0:
        raise IndivisibleP(
            f"num_tasks={spec.num_tasks} does not divide total_params={spec.total_params}"
        )
    rng = np.random.default_rng(spec.seed)
    block = spec.total_params // spec.num_tasks
    perm = rng.permutation(spec.total_params)
    supports = [
        np.sort(perm[t * block : (t + 1) * block]) for t in range(spec.num_tasks)
    ]
    return _materialize(rng, spec, supports)


def gen_overlapping_tasks(
    spec: SyntheticSpec,
) -> tuple[TensorMap, list[TensorMap], list[np.ndarray]]:
    """Stress fixture: each task touches an independent random subset of
    floor(overlap_fraction * P) indices; subsets may intersect."""
    if spec.mode != "overlapping":
        raise ValueError(f"spec mode is {spec.mode!r}, expected 'overlapping'")
    rng = np.random.default_rng(spec.seed)
    size = math.floor(spec.overlap_fraction * spec.total_params)
    supports = [
        np.sort(rng.choice(spec.total_params, size=size, replace=False))
        for _ in range(spec.num_tasks)
    ]
    return _materialize(rng, spec, supports)


def support_indicator(support: np.ndarray, shapes: dict[str, Sequence[int]]) -> Mask:
    """Ground-truth mask: 1 exactly on the given flat indices."""
    total = sum(int(np.prod(s, dtype=np.int64)) for s in shapes.values())
    flat = np.zeros(total, dtype=bool)
    flat[np.asarray(support, dtype=np.int64)] = True
    return Mask.from_concat(flat, shapes)


def normalized_accuracy(
    merged_accs: Sequence[float], finetuned_accs: Sequence[float]
) -> float:
    """Mean over tasks of merged/fine-tuned accuracy ratios, in percent.

    Values above 100 are legal: a merged model may beat its per-task
    reference.
    """
    if len(merged_accs) != len(finetuned_accs):
        raise LengthMismatch(
            f"got {len(merged_accs)} merged vs {len(finetuned_accs)} fine-tuned accuracies"
        )
    if len(merged_accs) == 0:
        raise LengthMismatch("need at least one accuracy pair")
    for acc in finetuned_accs:
        if not acc > 0:
            raise ZeroDenominator(f"fine-tuned accuracies must be positive, got {acc}")
    ratios = [m / f for m, f in zip(merged_accs, finetuned_accs)]
    return 100.0 * sum(ratios) / len(ratios)


def l1_scorer(target: TensorMap) -> Scorer:
    """Score a candidate by negated L1 distance to `target` (0 is perfect)."""

    def score(candidate: TensorMap) -> float:
        if candidate.keys() != target.keys():
            raise ValueError("candidate and target key sets differ")
        total = 0.0
        for name, arr in target.items():
            total += float(np.sum(np.abs(candidate[name] - arr), dtype=np.float64))
        return -total

    return Scorer(name="neg_l1", fn=score)
