"""
register.py: Register image pairs with a trained, frozen regularizer

Runs the global stage and then the local stage over the momentum only. For
each pair OUT receives:

    phi_inv.bin, phi_inv_global.bin   inverse maps after each stage (computation grid)
    momentum.bin                      final momentum
    warped_source.pgm                 source warped by phi_inv at full resolution
    energy.csv                        energy terms per iteration, then the final energy
    weights.bin, weights_<i>.pgm      local kernel weights
    stddev.bin, stddev.pgm            local standard deviation sqrt(sum_i w_i sigma_i^2)
    config.txt                        resolved configuration

Usage:
    python register.py --theta FILE --source IMG --target IMG --out DIR [--config FILE] [--debug]
    python register.py --theta FILE --corpus DIR --out DIR [--config FILE] [--jobs K] [--debug]

Options:
    --theta   Regressor parameter file written by train.py
    --source  Source image (PGM or raw float64)
    --target  Target image
    --corpus  Register every case of a corpus into OUT/<case>/
    --out     Output directory
    --config  Configuration file
    --jobs    Cases registered in parallel (corpus mode)
    --debug   Enable debug output
"""

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from field_io import read_image, write_field, write_heatmap, write_pgm, write_raw
from optimizer_ops import HISTORY_HEADER, register_with_frozen_metric
from regressor_ops import load_params
from run_config import load_config, write_config
from run_utils import ensure_dir, print_flush, run_command, setup_logging, write_csv
from synth_ops import list_cases, stddev_map
from vsvf_ops import make_task, warp

logger = logging.getLogger(__name__)


def write_registration(out_dir, task, result, spec, config):
    ensure_dir(out_dir)
    config_hash = write_config(out_dir, config)
    write_field(os.path.join(out_dir, "phi_inv.bin"), result.phi_inv)
    write_field(os.path.join(out_dir, "phi_inv_global.bin"), result.phi_inv_global)
    write_raw(os.path.join(out_dir, "momentum.bin"), result.momentum, task.grid)
    write_pgm(os.path.join(out_dir, "warped_source.pgm"), warp(task.source, result.phi_inv).values)

    final = {"iteration": len(result.history) + 1, "stage": "final", "lr": 0.0, **result.energy.as_row()}
    write_csv(os.path.join(out_dir, "energy.csv"), HISTORY_HEADER, result.history + [final], config_hash)

    weights = result.local_weights.weights
    write_raw(os.path.join(out_dir, "weights.bin"), weights, task.grid)
    for i, w in enumerate(weights):
        write_heatmap(os.path.join(out_dir, f"weights_{i}.pgm"), w)
    stddev = stddev_map(result.local_weights, spec)
    write_field(os.path.join(out_dir, "stddev.bin"), stddev)
    write_heatmap(os.path.join(out_dir, "stddev.pgm"), stddev.values)


def register_pair(source_path, target_path, out_dir, theta, regressor_config, config, task_id=0):
    task = make_task(read_image(source_path), read_image(target_path), config.vsvf, task_id=task_id)
    result = register_with_frozen_metric(task, theta, config.optimizer, config.kernels, config.vsvf,
                                         regressor_config)
    for flag in result.diagnostics:
        logger.warning("%s: %s", task_id, flag)
    write_registration(out_dir, task, result, config.kernels, config)
    return result


def main(argv=None):
    parser = argparse.ArgumentParser(description="Register image pairs with a frozen learned regularizer")
    parser.add_argument("--theta", required=True, help="Regressor parameter file")
    parser.add_argument("--source", help="Source image")
    parser.add_argument("--target", help="Target image")
    parser.add_argument("--corpus", help="Corpus directory to register case by case")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--config", help="Configuration file")
    parser.add_argument("--jobs", type=int, help="Cases registered in parallel")
    parser.add_argument("--debug", action="store_true", help="Enable debug output")
    args = parser.parse_args(argv)
    setup_logging(args.debug)

    if args.corpus is None and (args.source is None or args.target is None):
        parser.error("either --corpus or both --source and --target are required")

    config = load_config(args.config)
    if args.jobs is not None:
        config = config.replace("run", jobs=args.jobs)
    theta, regressor_config = load_params(args.theta)
    if regressor_config != config.regressor:
        logger.info("Using the regressor settings stored with %s", args.theta)
    config = config.replace("regressor", **dataclasses.asdict(regressor_config))

    if args.corpus is None:
        result = register_pair(args.source, args.target, args.out, theta, regressor_config, config)
        print_flush(f"Final energy {result.energy.total:.6g} (sim {result.energy.sim:.6g}); "
                    f"results in {args.out}")
        return

    names = list_cases(args.corpus)

    def one(index):
        name = names[index]
        case_dir = os.path.join(args.corpus, name)
        register_pair(os.path.join(case_dir, "source.pgm"), os.path.join(case_dir, "target.pgm"),
                      os.path.join(args.out, name), theta, regressor_config, config, task_id=name)
        print_flush(f"Registered case {index + 1} of {len(names)}")

    ensure_dir(args.out)
    if config.run.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.run.jobs) as pool:
            list(pool.map(one, range(len(names))))
    else:
        for index in range(len(names)):
            one(index)


if __name__ == "__main__":
    sys.exit(run_command(main))
