"""
train.py: Two-stage training of the local regularizer on a registration corpus

Stage one fits one momentum per pair under the global multi-Gaussian kernel;
stage two fits the momenta and the regressor jointly under the full local
energy. Checkpoints (theta.bin, shared_state.bin, task_<id>.bin, log.csv, config.txt)
are rewritten into OUT after every epoch.

Usage:
    python train.py --corpus DIR --out DIR [--config FILE] [--jobs K] [--resume] [--debug]

Options:
    --corpus  Corpus directory with one subdirectory (source.pgm, target.pgm) per pair
    --out     Checkpoint directory
    --config  Configuration file
    --jobs    Pairs evaluated in parallel within a batch
    --resume  Continue from the checkpoint in OUT (same corpus and configuration)
    --debug   Enable debug output
"""

import argparse
import logging
import os
import sys

from field_io import read_image
from optimizer_ops import train_curriculum
from run_config import load_config
from run_utils import ensure_dir, print_flush, run_command, setup_logging
from synth_ops import list_cases
from vsvf_ops import make_task

logger = logging.getLogger(__name__)


def load_tasks(corpus_dir, vsvf_config):
    """Registration tasks for every case directory, numbered in name order."""
    tasks = []
    for index, name in enumerate(list_cases(corpus_dir)):
        case_dir = os.path.join(corpus_dir, name)
        source = read_image(os.path.join(case_dir, "source.pgm"))
        target = read_image(os.path.join(case_dir, "target.pgm"))
        tasks.append(make_task(source, target, vsvf_config, task_id=index))
    logger.info("Loaded %d pairs from %s", len(tasks), corpus_dir)
    return tasks


def main(argv=None):
    parser = argparse.ArgumentParser(description="Train the local regularizer on a registration corpus")
    parser.add_argument("--corpus", required=True, help="Corpus directory")
    parser.add_argument("--out", required=True, help="Checkpoint directory")
    parser.add_argument("--config", help="Configuration file")
    parser.add_argument("--jobs", type=int, help="Pairs evaluated in parallel")
    parser.add_argument("--resume", action="store_true", help="Continue from the checkpoint in --out")
    parser.add_argument("--debug", action="store_true", help="Enable debug output")
    args = parser.parse_args(argv)
    setup_logging(args.debug)

    config = load_config(args.config)
    if args.jobs is not None:
        config = config.replace("run", jobs=args.jobs)
    ensure_dir(args.out)

    tasks = load_tasks(args.corpus, config.vsvf)
    result = train_curriculum(tasks, config.optimizer, config.kernels, config.vsvf, config.regressor,
                              seed=config.run.seed, out_dir=args.out, config_text=config.text(),
                              config_hash=config.hash(), jobs=config.run.jobs, resume=args.resume)
    print_flush(f"Trained on {len(tasks)} pairs for {len(result.log)} epochs; checkpoint in {args.out}")


if __name__ == "__main__":
    sys.exit(run_command(main))
