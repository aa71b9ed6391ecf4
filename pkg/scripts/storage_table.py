#!/usr/bin/env python3
"""Print storage-cost tables for checkpoint-collection schemes.

With no arguments, prints two reference settings (a 20-task ViT-scale
collection and a 7-task T5-scale collection); pass --T/--p-prime/--frozen
for a custom one.
"""

import argparse

from tallpack import storage_report

REFERENCE_SETTINGS = [
    ("20-task ViT-B/32 scale", 20, 87.8e6, 24.7e6),
    ("7-task T5-large scale", 7, 750e6, 34.4e6),
]


def print_report(title, num_tasks, p_prime, frozen):
    report = storage_report(num_tasks, p_prime, frozen)
    print(f"\n{title}  (T={num_tasks}, P'={int(p_prime):,}, F={int(frozen):,})")
    for row in report.rows:
        marker = ">" if row.lower_bound else " "
        print(f"  {row.method:<20} {row.bits:>16,d} bits  {marker}{row.gigabits:>6.1f} Gb")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--T", type=int, default=None)
    parser.add_argument("--p-prime", type=float, default=None)
    parser.add_argument("--frozen", type=float, default=0.0)
    args = parser.parse_args()

    if args.T is not None and args.p_prime is not None:
        print_report("custom setting", args.T, args.p_prime, args.frozen)
    else:
        for title, tasks, p_prime, frozen in REFERENCE_SETTINGS:
            print_report(title, tasks, p_prime, frozen)


if __name__ == "__main__":
    main()
