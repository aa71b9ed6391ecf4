#!/usr/bin/env python3
"""Equal-storage comparison of per-task reconstruction quality.

On an overlapping synthetic collection, compares the weight-space L1 error of
rebuilding each checkpoint from:
  - task-localization masks over the merged vector (the compressed archive),
  - magnitude masks over the merged vector (top 10% by |value|),
  - per-task magnitude pruning at the keep count matching the mask budget.

Usage: python scripts/baseline_comparison.py [--p 20000] [--tasks 8]
       [--overlap 0.3] [--seed 0]
"""

import argparse

import numpy as np

from tallpack import (
    SyntheticSpec,
    apply_vector,
    compute_task_vector,
    gen_overlapping_tasks,
    l1_scorer,
    magnitude_mask,
    magnitude_prune,
    prune_keep_fraction_for_budget,
    reconstruct,
    sum_task_vectors,
    tune_lambda,
)


def l1(a, b) -> float:
    return sum(float(np.sum(np.abs(a[k] - b[k]), dtype=np.float64)) for k in a.keys())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--p", type=int, default=20_000)
    parser.add_argument("--tasks", type=int, default=8)
    parser.add_argument("--overlap", type=float, default=0.3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    spec = SyntheticSpec(
        total_params=args.p,
        num_tasks=args.tasks,
        seed=args.seed,
        mode="overlapping",
        overlap_fraction=args.overlap,
    )
    pretrained, finetuned, _ = gen_overlapping_tasks(spec)
    vectors = [
        compute_task_vector(ft, pretrained, label=f"task{i:02d}")
        for i, ft in enumerate(finetuned)
    ]
    mtl = sum_task_vectors(vectors)
    prune_keep = prune_keep_fraction_for_budget(args.tasks, args.p, 0)

    print(
        f"P={args.p} T={args.tasks} overlap={args.overlap} "
        f"(prune keep fraction at equal budget: {prune_keep:.4f})"
    )
    print(f"{'task':>8}  {'localization':>14}  {'magnitude-mask':>15}  {'pruning':>12}")
    totals = np.zeros(3)
    for vec, ft in zip(vectors, finetuned):
        _, tall = tune_lambda(
            vec, mtl, pretrained, (0.2, 0.3, 0.4, 0.5, 0.6), l1_scorer(ft)
        )
        errors = (
            l1(reconstruct(pretrained, mtl, tall), ft),
            l1(reconstruct(pretrained, mtl, magnitude_mask(vec, 0.10)), ft),
            l1(apply_vector(pretrained, magnitude_prune(vec, prune_keep), 1.0), ft),
        )
        totals += errors
        print(
            f"{vec.source_label:>8}  {errors[0]:>14.3f}  {errors[1]:>15.3f}  {errors[2]:>12.3f}"
        )
    means = totals / args.tasks
    print(f"{'mean':>8}  {means[0]:>14.3f}  {means[1]:>15.3f}  {means[2]:>12.3f}")


if __name__ == "__main__":
    main()
