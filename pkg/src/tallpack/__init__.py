"""Weight-space checkpoint merging and mask-based multi-checkpoint compression.

A collection of fine-tuned checkpoints sharing one pre-trained model is
merged through task-vector arithmetic (plain summation, TIES, or
consensus-filtered variants) and can be compressed into a single archive of
{pre-trained weights, merged task vector, per-task bit-packed masks} with
per-task reconstruction and exact storage accounting.
"""

from .baselines import (
    magnitude_mask,
    magnitude_prune,
    prune_keep_count_for_budget,
    prune_keep_fraction_for_budget,
)
from .compression import (
    PackedMask,
    StorageReport,
    StorageRow,
    TallpackArchive,
    build_archive,
    pack_mask,
    read_tallpack,
    reconstruct,
    reconstruct_task,
    storage_report,
    unpack_mask,
    write_tallpack,
)
from .errors import TallpackError
from .merging import (
    MergeConfig,
    MergeResult,
    consensus_mask,
    consensus_merge,
    merge_checkpoints,
    task_arithmetic_merge,
    ties_merge,
    tune_alpha,
    weight_average,
)
from .synthetic import (
    Scorer,
    SyntheticSpec,
    gen_disjoint_tasks,
    gen_overlapping_tasks,
    l1_scorer,
    normalized_accuracy,
    support_indicator,
)
from .tall_masks import (
    Mask,
    MaskEntry,
    MaskSet,
    WeightTaxonomy,
    build_tall_mask,
    classify_weights,
    mask_agreement,
    oracle_mask,
    tune_lambda,
)
from .task_vectors import (
    MultiTaskVector,
    TaskVector,
    TrainableKeySpec,
    apply_vector,
    compute_task_vector,
    sum_task_vectors,
)
from .tensor_store import (
    CompatReport,
    TensorMap,
    TensorMeta,
    check_compatibility,
    load_archive,
    save_archive,
)

__version__ = "0.1.0"
