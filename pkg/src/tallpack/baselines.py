"""Equal-storage compression baselines: magnitude masking and pruning."""

from __future__ import annotations

import math

import numpy as np

from .errors import BadFraction
from .tall_masks import Mask
from .task_vectors import TaskVector
from .tensor_store import TensorMap

__all__ = [
    "magnitude_mask",
    "magnitude_prune",
    "prune_keep_count_for_budget",
    "prune_keep_fraction_for_budget",
]

DEFAULT_MASK_FRACTION = 0.10


def _top_magnitude_flat(vector: TaskVector, fraction: float) -> np.ndarray:
    """Flat boolean selection of the ceil(fraction * P') largest |values|.

    Ties at the threshold go to the lower flat index (tensor-name
    lexicographic order, row-major within a tensor).
    """
    flat = vector.tensors.concat()
    keep = math.ceil(fraction * flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    selected = np.zeros(flat.size, dtype=bool)
    selected[order[:keep]] = True
    return selected


def magnitude_mask(tau_t: TaskVector, top_fraction: float = DEFAULT_MASK_FRACTION) -> Mask:
    """Mask selecting the top fraction of a task vector by absolute value."""
    if not (0 < top_fraction <= 1):
        raise BadFraction(f"top_fraction must be in (0, 1], got {top_fraction}")
    selected = _top_magnitude_flat(tau_t, top_fraction)
    return Mask.from_concat(selected, tau_t.tensors.shapes())


def magnitude_prune(tau_t: TaskVector, keep_fraction: float) -> TaskVector:
    """Zero all but the top keep_fraction of scalars; kept values are bit-exact."""
    if not (0 < keep_fraction <= 1):
        raise BadFraction(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    selected = _top_magnitude_flat(tau_t, keep_fraction)
    flat = tau_t.tensors.concat()
    pruned = np.where(selected, flat, np.float32(0.0))

    out: dict[str, np.ndarray] = {}
    cursor = 0
    for name, arr in tau_t.tensors.items():
        out[name] = pruned[cursor : cursor + arr.size].reshape(arr.shape).copy()
        cursor += arr.size
    return TaskVector(tensors=TensorMap._from_trusted(out), source_label=tau_t.source_label)


def prune_keep_count_for_budget(num_tasks: int, trainable_params: int, frozen_params: int) -> int:
    """Scalars to keep per pruned task vector under the mask-scheme bit budget.

    The budget (64+T)P' + 32F first pays for the two dense float payloads
    (64P' + 32F); the remainder is split across T tasks at 64 bits per kept
    entry (32-bit value plus 32-bit position index).
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if trainable_params < 0 or frozen_params < 0:
        raise ValueError("parameter counts must be non-negative")
    budget = (64 + num_tasks) * trainable_params + 32 * frozen_params
    spare = budget - 64 * trainable_params - 32 * frozen_params
    return spare // (64 * num_tasks)


def prune_keep_fraction_for_budget(
    num_tasks: int, trainable_params: int, frozen_params: int
) -> float:
    """The keep fraction matching prune_keep_count_for_budget."""
    if trainable_params < 1:
        raise ValueError("need at least one trainable parameter")
    kept = prune_keep_count_for_budget(num_tasks, trainable_params, frozen_params)
    return kept / trainable_params
