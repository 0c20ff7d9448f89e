"""
synth-gen.py: Generate a synthetic concentric-ring registration corpus

Writes one directory per case (source.pgm, target.pgm, gt_map.bin,
gt_weights_<i>.bin, masks.bin, manifest.txt) plus a corpus manifest.txt and
the resolved config.txt into OUT.

Usage:
    python synth-gen.py --out DIR --n N [--seed S] [--size 128] [--config FILE] [--jobs K] [--debug]

Options:
    --out     Corpus directory to create
    --n       Number of cases
    --seed    Root seed (overrides the config file and MREG_SEED)
    --size    Image size in pixels (square)
    --config  Configuration file ([kernels] and [synthdata] are used)
    --jobs    Cases generated in parallel
    --debug   Enable debug output
"""

import argparse
import logging
import sys

from run_config import load_config, write_config
from run_utils import ensure_dir, print_flush, run_command, setup_logging
from synth_ops import generate_corpus

logger = logging.getLogger(__name__)


def main(argv=None):
    parser = argparse.ArgumentParser(description="Generate a synthetic concentric-ring registration corpus")
    parser.add_argument("--out", required=True, help="Corpus directory to create")
    parser.add_argument("--n", type=int, required=True, help="Number of cases")
    parser.add_argument("--seed", type=int, help="Root seed")
    parser.add_argument("--size", type=int, help="Image size in pixels")
    parser.add_argument("--config", help="Configuration file")
    parser.add_argument("--jobs", type=int, help="Cases generated in parallel")
    parser.add_argument("--debug", action="store_true", help="Enable debug output")
    args = parser.parse_args(argv)
    setup_logging(args.debug)

    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace("run", seed=args.seed)
    if args.jobs is not None:
        config = config.replace("run", jobs=args.jobs)
    if args.size is not None:
        config = config.replace("synthdata", size=args.size)

    ensure_dir(args.out)
    write_config(args.out, config)
    generate_corpus(args.n, config.run.seed, config.kernels, config.synthdata, out_dir=args.out,
                    jobs=config.run.jobs)
    print_flush(f"Wrote {args.n} cases to {args.out}")


if __name__ == "__main__":
    sys.exit(run_command(main))
