"""Run every shipped figure config and write one bundle per config.

    python scripts/reproduce_figures.py                 # desk-scale configs
    python scripts/reproduce_figures.py --full          # include the 300-node *_full configs
    python scripts/reproduce_figures.py fig_c_hk.cfg    # just one
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from glcascade.cli import main as cli_main

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("configs", nargs="*", help="config file names under configs/ (default: all)")
    p.add_argument("--full", action="store_true", help="also run the full-size *_full configs (hours)")
    p.add_argument("--out", default="results", help="parent directory for the bundles")
    p.add_argument("--jobs", type=int, default=None)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if args.configs:
        paths = [ROOT / "configs" / c for c in args.configs]
    else:
        paths = sorted((ROOT / "configs").glob("*.cfg"))
        if not args.full:
            paths = [c for c in paths if not c.stem.endswith("_full")]
    status = 0
    for cfg in paths:
        out = Path(args.out) / cfg.stem
        start = time.perf_counter()
        cmd = ["experiment", "--config", str(cfg), "--out", str(out)]
        if args.jobs:
            cmd += ["--jobs", str(args.jobs)]
        if cfg.stem.startswith("time_"):
            cmd.append("--timing")
        code = cli_main(cmd)
        logging.info("%-24s exit %d  %6.1fs  -> %s", cfg.name, code, time.perf_counter() - start, out)
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main())
