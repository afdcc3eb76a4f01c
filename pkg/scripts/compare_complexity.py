#!/usr/bin/env python3
"""Print the FLOPs/params comparison table across the named model configs,
optionally with measured throughput (machine-dependent).

Usage:
    python scripts/compare_complexity.py [--resolution 384] [--fps]
"""

import argparse
import sys

from mtscene.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--resolution", type=int, default=384)
    parser.add_argument("--fps", action="store_true")
    args = parser.parse_args()

    argv = ["profile",
            "--preset", "r18-noattn", "--preset", "r18",
            "--preset", "r101-noattn", "--preset", "r101",
            "--resolution", str(args.resolution)]
    if args.fps:
        argv.append("--fps")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
