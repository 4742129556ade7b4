"""Command line for the activation dumper."""

from __future__ import annotations

import argparse
import sys

from .extract import extract_directory
from .model import WeightDownloadError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="agf-extract",
        description="Dump SE-ResNeXt-50 stage activations to an AGF1 file.",
    )
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--stages", type=int, choices=[5, 17], default=5)
    p.add_argument("--pool", default="gap",
                   help="none, gap, or avg:KxK (default gap)")
    p.add_argument("--crops", default="1",
                   help="1 for the deterministic center crop, or N@0.875 for "
                        "N random crops at 87.5%% scale")
    p.add_argument("--out", required=True, help="output AGF1 path")
    p.add_argument("--weights", default="auto",
                   help="auto (download), random, or a state-dict path")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for random crops and random weights")
    p.add_argument("--batch-size", type=int, default=8)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ids = extract_directory(
            args.images,
            args.out,
            stages=args.stages,
            pool=args.pool,
            crops=args.crops,
            weights=args.weights,
            seed=args.seed,
            batch_size=args.batch_size,
        )
    except WeightDownloadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"wrote {len(ids)} feature rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
