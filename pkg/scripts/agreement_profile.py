#!/usr/bin/env python3
"""Mask-agreement profile on an overlapping synthetic collection.

Builds per-task masks against the plain-sum and TIES merged vectors and
prints the agreement histogram (how many scalars are selected by exactly n
masks) plus the catastrophic/selfish/general/universal bucket sizes for each.

Usage: python scripts/agreement_profile.py [--p 16384] [--tasks 8]
       [--overlap 0.3] [--lam 0.4] [--seed 0] [--csv out.csv]
"""

import argparse
import csv
import sys

from tallpack import (
    MaskSet,
    SyntheticSpec,
    build_tall_mask,
    classify_weights,
    compute_task_vector,
    gen_overlapping_tasks,
    sum_task_vectors,
    ties_merge,
)


def profile(vectors, mtl, lam):
    maskset = MaskSet.build(
        [v.source_label for v in vectors],
        [build_tall_mask(v, mtl, lam) for v in vectors],
        [lam] * len(vectors),
    )
    return classify_weights(maskset)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--p", type=int, default=16_384)
    parser.add_argument("--tasks", type=int, default=8)
    parser.add_argument("--overlap", type=float, default=0.3)
    parser.add_argument("--lam", type=float, default=0.4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trim-fraction", type=float, default=0.2)
    parser.add_argument("--csv", default=None, help="also write rows to this CSV file")
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

    profiles = {
        "task_arithmetic": profile(vectors, sum_task_vectors(vectors), args.lam),
        "ties": profile(vectors, ties_merge(vectors, args.trim_fraction), args.lam),
    }

    print(f"P={args.p} T={args.tasks} overlap={args.overlap} lambda={args.lam}")
    header = ["n"] + list(profiles)
    print("  ".join(f"{h:>16}" for h in header))
    for n in range(args.tasks + 1):
        cells = [f"{n:>16d}"] + [
            f"{tax.counts[n]:>9d} ({tax.fraction(n):5.1%})" for tax in profiles.values()
        ]
        print("  ".join(cells))
    for name, tax in profiles.items():
        print(
            f"{name}: catastrophic={tax.catastrophic} selfish={tax.selfish} "
            f"general={tax.general} universal={tax.universal}"
        )

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["merge_method", "n", "count", "fraction"])
            for name, tax in profiles.items():
                for row in tax.to_rows():
                    writer.writerow([name, row["n"], row["count"], row["fraction"]])
        print(f"wrote {args.csv}", file=sys.stderr)


if __name__ == "__main__":
    main()
