#!/usr/bin/env python3
"""Regenerate the cached benchmark artifacts read by tests/test_acceptance.py.

Runs the overfit smoke test and both cross-validation variants, writing
results under artifacts/.  Expect several hours of CPU on a laptop.
"""

import argparse
from pathlib import Path

from octplaque.protocols import crossval_benchmark, imbalanced_spec, overfit_smoke

ROOT = Path(__file__).resolve().parent.parent / "artifacts"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(ROOT), help="artifact directory")
    parser.add_argument(
        "--only", choices=["overfit", "balanced", "imbalanced"],
        help="run a single benchmark instead of all three",
    )
    args = parser.parse_args()
    out = Path(args.out)

    if args.only in (None, "overfit"):
        r = overfit_smoke(out / "criterion6")
        print(f"overfit: accuracy={r['train_patch_accuracy']:.4f} "
              f"runtime={r['runtime_seconds']:.0f}s")
    if args.only in (None, "balanced"):
        r = crossval_benchmark(out / "criterion7_balanced")
        print(f"balanced crossval: accuracy={r['accuracy']:.4f} "
              f"sensitivity={r['sensitivity']} runtime={r['runtime_seconds']:.0f}s")
    if args.only in (None, "imbalanced"):
        r = crossval_benchmark(out / "criterion7_imbalanced",
                               spec=imbalanced_spec(), tag="imbalanced")
        print(f"imbalanced crossval: accuracy={r['accuracy']:.4f} "
              f"sensitivity={r['sensitivity']} runtime={r['runtime_seconds']:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
