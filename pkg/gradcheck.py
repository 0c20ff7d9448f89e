"""
gradcheck.py: Finite-difference check of the registration energy gradients

Builds a random instance (images, nonzero momentum, freshly initialised
regressor) and compares tape gradients with central differences for every
energy term and the total: with respect to the momentum in both stages and
with respect to the regressor parameters in the local stage.

Usage:
    python gradcheck.py [--size 8] [--seed S] [--samples 50] [--step 1e-5] [--config FILE] [--debug]
"""

import argparse
import logging
import sys

from run_config import load_config
from run_utils import MregError, print_flush, run_command, setup_logging
from vsvf_ops import gradient_check_suite

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4


def main(argv=None):
    parser = argparse.ArgumentParser(description="Finite-difference check of the energy gradients")
    parser.add_argument("--size", type=int, default=8, help="Grid size of the random instance")
    parser.add_argument("--seed", type=int, help="Seed of the random instance")
    parser.add_argument("--samples", type=int, default=50, help="Coordinates sampled per check")
    parser.add_argument("--step", type=float, default=1e-5, help="Central-difference step")
    parser.add_argument("--config", help="Configuration file")
    parser.add_argument("--debug", action="store_true", help="Enable debug output")
    args = parser.parse_args(argv)
    setup_logging(args.debug)

    config = load_config(args.config)
    seed = config.run.seed if args.seed is None else args.seed
    rows = gradient_check_suite(size=args.size, seed=seed, spec=config.kernels, config=config.vsvf,
                                regressor_config=config.regressor, h=args.step, samples=args.samples)

    for wrt, stage, term, err in rows:
        print_flush(f"{wrt:<9} {stage:<7} {term:<13} {err:.3e}")
    worst = max(err for _, _, _, err in rows)
    print_flush(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if worst >= TOLERANCE:
        raise MregError(f"gradient check failed: max relative error {worst:.3e}")


if __name__ == "__main__":
    sys.exit(run_command(main))
