"""Merging strategies: weight averaging, task arithmetic, TIES, consensus."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._parallel import parallel_map
from .errors import BadTrimFraction, EmptyGrid, EmptyInput, IncompatibleShapes
from .synthetic import Scorer, l1_scorer
from .tall_masks import DEFAULT_LAMBDA_GRID, Mask, MaskSet, tune_lambda
from .task_vectors import (
    MultiTaskVector,
    TaskVector,
    TrainableKeySpec,
    VectorLike,
    apply_vector,
    compute_task_vector,
    sum_task_vectors,
)
from .tensor_store import TensorMap, ensure_compatible

__all__ = [
    "MergeConfig",
    "MergeResult",
    "weight_average",
    "task_arithmetic_merge",
    "ties_merge",
    "consensus_mask",
    "consensus_merge",
    "tune_alpha",
    "merge_checkpoints",
]

log = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_CONSENSUS_K = 2
DEFAULT_TIES_TRIM_FRACTION = 0.2

MERGE_METHODS = ("average", "task_arithmetic", "ties", "consensus_ta", "consensus_ties")


@dataclass(frozen=True)
class MergeConfig:
    """Method selector plus the hyper-parameters the methods consume.

    alpha = None means "tune over alpha_grid with the active scorer".
    """

    method: str = "task_arithmetic"
    alpha: float | None = None
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    consensus_k: int = DEFAULT_CONSENSUS_K
    ties_trim_fraction: float = DEFAULT_TIES_TRIM_FRACTION
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if self.method not in MERGE_METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; choose from {MERGE_METHODS}")
        if self.alpha is not None and not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be a finite non-negative scalar, got {self.alpha}")
        if not self.alpha_grid:
            raise EmptyGrid("alpha grid is empty")
        if self.consensus_k < 0:
            raise ValueError(f"consensus_k must be >= 0, got {self.consensus_k}")
        if not (0 < self.ties_trim_fraction <= 1):
            raise BadTrimFraction(f"trim fraction must be in (0, 1], got {self.ties_trim_fraction}")
        if not self.lambda_grid:
            raise EmptyGrid("lambda grid is empty")


def weight_average(checkpoints: Sequence[TensorMap]) -> TensorMap:
    """Elementwise float32 mean over all keys of every checkpoint."""
    if not checkpoints:
        raise EmptyInput("need at least one checkpoint")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        if other.keys() != first.keys():
            raise IncompatibleShapes(f"key sets differ: {first.keys()} vs {other.keys()}")
        ensure_compatible(first, other, "weight average")
    count = np.float32(len(checkpoints))
    out: dict[str, np.ndarray] = {}
    for name in first.keys():
        acc = first[name].copy()
        for other in checkpoints[1:]:
            acc += other[name]
        out[name] = acc / count
    return TensorMap._from_trusted(out)


def task_arithmetic_merge(
    pretrained: TensorMap, vectors: Sequence[TaskVector], alpha: float
) -> TensorMap:
    """pretrained + alpha * sum of task vectors."""
    return apply_vector(pretrained, sum_task_vectors(vectors), alpha)


def ties_merge(vectors: Sequence[TaskVector], trim_fraction: float = DEFAULT_TIES_TRIM_FRACTION) -> MultiTaskVector:
    """Trim / elect sign / disjoint-mean aggregation of task vectors.

    Per task, all but the top `trim_fraction` of scalars by absolute value
    (one global threshold across tensors) are zeroed; per coordinate the
    elected sign is the sign of the sum of trimmed values, and the output is
    the mean of the trimmed values matching that sign (0 where none match).
    """
    if not vectors:
        raise EmptyInput("need at least one task vector")
    if not (0 < trim_fraction <= 1):
        raise BadTrimFraction(f"trim fraction must be in (0, 1], got {trim_fraction}")
    first = vectors[0].tensors
    for vec in vectors[1:]:
        if vec.tensors.keys() != first.keys():
            raise IncompatibleShapes(f"key sets differ: {first.keys()} vs {vec.tensors.keys()}")
        ensure_compatible(first, vec.tensors, "ties merge")

    total_params = first.total_elements
    keep = math.ceil(trim_fraction * total_params)
    trimmed_rows: list[np.ndarray] = []
    for vec in vectors:
        flat = vec.tensors.concat()
        # stable sort on descending magnitude: threshold ties go to lower flat index
        order = np.argsort(-np.abs(flat), kind="stable")
        trimmed = np.zeros_like(flat)
        kept = order[:keep]
        trimmed[kept] = flat[kept]
        trimmed_rows.append(trimmed)

    total = trimmed_rows[0].copy()
    for row in trimmed_rows[1:]:
        total += row
    elected = np.sign(total)

    matched_sum = np.zeros_like(total)
    matched_count = np.zeros(total.shape, dtype=np.int64)
    for row in trimmed_rows:
        match = (np.sign(row) == elected) & (elected != 0)
        matched_sum += np.where(match, row, np.float32(0.0))
        matched_count += match
    flat_out = np.where(
        matched_count > 0,
        matched_sum / np.maximum(matched_count, 1).astype(np.float32),
        np.float32(0.0),
    ).astype(np.float32)

    out: dict[str, np.ndarray] = {}
    cursor = 0
    for name, arr in first.items():
        out[name] = flat_out[cursor : cursor + arr.size].reshape(arr.shape).copy()
        cursor += arr.size
    return MultiTaskVector(tensors=TensorMap._from_trusted(out), num_source_tasks=len(vectors))


def consensus_mask(masks: MaskSet, k: int) -> Mask:
    """Select scalars chosen by at least k of the T per-task masks."""
    counts = masks.coordinate_counts()
    return Mask.from_concat(counts >= k, masks.shapes())


def consensus_merge(tau_mtl: MultiTaskVector, cmask: Mask) -> MultiTaskVector:
    """Hadamard-filter the multi-task vector with a 0/1 consensus mask."""
    vt = tau_mtl.tensors
    if cmask.keys() != vt.keys() or cmask.shapes() != vt.shapes():
        raise IncompatibleShapes("consensus mask layout does not match the vector")
    out = {
        name: np.where(cmask[name], arr, np.float32(0.0)) for name, arr in vt.items()
    }
    return MultiTaskVector(
        tensors=TensorMap._from_trusted(out), num_source_tasks=tau_mtl.num_source_tasks
    )


def tune_alpha(
    pretrained: TensorMap,
    vector: VectorLike,
    grid: Sequence[float],
    scorer: Callable[[TensorMap], float],
    threads: int = 1,
) -> float:
    """Pick the grid value maximizing scorer(pretrained + alpha * vector).

    Ties break toward the smaller alpha.
    """
    if not grid:
        raise EmptyGrid("alpha grid is empty")

    def evaluate(alpha: float) -> float:
        return float(scorer(apply_vector(pretrained, vector, alpha)))

    alphas = sorted(set(float(a) for a in grid))
    workers = threads if not getattr(scorer, "serial", True) else 1
    scores = parallel_map(evaluate, alphas, workers)

    best_alpha, best_score = alphas[0], scores[0]
    for alpha, score in zip(alphas[1:], scores[1:]):
        if score > best_score:
            best_alpha, best_score = alpha, score
    return best_alpha


@dataclass(frozen=True)
class MergeResult:
    """A merged checkpoint plus the hyper-parameters that produced it."""

    merged: TensorMap
    method: str
    alpha: float | None = None
    consensus_k: int | None = None
    lambdas: tuple[tuple[str, float], ...] | None = None
    mtl_vector: MultiTaskVector | None = None

    def metadata(self) -> dict:
        meta = {"method": self.method, "alpha": self.alpha}
        if self.consensus_k is not None:
            meta["consensus_k"] = self.consensus_k
        if self.lambdas is not None:
            meta["lambda_per_task"] = {label: lam for label, lam in self.lambdas}
        return meta


def _mean_l1_scorer(targets: Sequence[TensorMap]) -> Scorer:
    per_task = [l1_scorer(t) for t in targets]

    def score(candidate: TensorMap) -> float:
        return sum(s(candidate) for s in per_task) / len(per_task)

    return Scorer(name="mean_neg_l1", fn=score)


def merge_checkpoints(
    pretrained: TensorMap,
    checkpoints: Sequence[TensorMap],
    labels: Sequence[str] | None = None,
    config: MergeConfig | None = None,
    key_spec: TrainableKeySpec | None = None,
    scorer: Callable[[TensorMap], float] | None = None,
    threads: int = 1,
) -> MergeResult:
    """Run one merging strategy end-to-end over a checkpoint collection.

    Consensus methods build per-task masks against the method's own merged
    vector (plain sum for consensus_ta, TIES output for consensus_ties) with
    per-task lambdas tuned on the grid, then filter it at threshold k.
    """
    if not checkpoints:
        raise EmptyInput("need at least one checkpoint to merge")
    config = config or MergeConfig()
    if labels is None:
        labels = [f"task{i:02d}" for i in range(len(checkpoints))]
    if len(labels) != len(checkpoints):
        raise ValueError("labels and checkpoints must have equal length")

    if config.method == "average":
        return MergeResult(merged=weight_average(checkpoints), method="average")

    vectors = [
        compute_task_vector(ckpt, pretrained, key_spec, label)
        for ckpt, label in zip(checkpoints, labels)
    ]
    if config.method in ("ties", "consensus_ties"):
        mtl = ties_merge(vectors, config.ties_trim_fraction)
    else:
        mtl = sum_task_vectors(vectors)

    lambdas = None
    consensus_k = None
    vector_to_apply: MultiTaskVector = mtl
    if config.method in ("consensus_ta", "consensus_ties"):
        if config.consensus_k > len(vectors):
            raise ValueError(
                f"consensus_k={config.consensus_k} exceeds the task count {len(vectors)}"
            )
        consensus_k = config.consensus_k

        def build_entry(pair):
            vec, ckpt = pair
            task_scorer = scorer if scorer is not None else l1_scorer(ckpt)
            lam, mask = tune_lambda(
                vec, mtl, pretrained, config.lambda_grid, task_scorer, threads=threads
            )
            return vec.source_label, lam, mask

        entries = parallel_map(build_entry, list(zip(vectors, checkpoints)), 1)
        lambdas = tuple((label, lam) for label, lam, _ in entries)
        maskset = MaskSet.build(
            [label for label, _, _ in entries],
            [mask for _, _, mask in entries],
            [lam for _, lam, _ in entries],
        )
        cmask = consensus_mask(maskset, consensus_k)
        vector_to_apply = consensus_merge(mtl, cmask)
        log.info("consensus mask density at k=%d: %.4f", consensus_k, cmask.density)

    if config.alpha is not None:
        alpha = config.alpha
    else:
        alpha_scorer = scorer if scorer is not None else _mean_l1_scorer(checkpoints)
        alpha = tune_alpha(
            pretrained, vector_to_apply, config.alpha_grid, alpha_scorer, threads=threads
        )
        log.info("tuned alpha=%.2f for method=%s", alpha, config.method)

    merged = apply_vector(pretrained, vector_to_apply, alpha)
    return MergeResult(
        merged=merged,
        method=config.method,
        alpha=alpha,
        consensus_k=consensus_k,
        lambdas=lambdas,
        mtl_vector=mtl,
    )
