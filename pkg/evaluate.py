"""
evaluate.py: Compare registration results against synthetic ground truth

For every case of the truth corpus, reads the output of register.py from
RUNS/<case>/ (phi_inv.bin, phi_inv_global.bin, weights.bin). A case without
results is an error. RUNS may also be a synthetic corpus, whose ground-truth
maps and weights are then scored; evaluating a corpus against itself gives a
zero-error report.

Writes into REPORT:
    displacement_errors.csv  per case, stage and region, plus pooled ALL rows (pixels)
    jacobian_stats.csv       determinant statistics of each estimated inverse map
    stddev_regions.csv       mean estimated and true sigma(x) per source region
    <case>_stddev.pgm, <case>_stddev_truth.pgm, <case>_weights_<i>.pgm heatmaps
    config.txt

Usage:
    python evaluate.py --runs DIR --truth DIR --out DIR [--config FILE] [--debug]
"""

import argparse
import logging
import os
import sys
from collections import defaultdict

import numpy as np

from field_io import read_field, read_raw, write_heatmap
from field_ops import resample
from run_config import load_config, write_config
from run_utils import DataIOError, ensure_dir, print_flush, run_command, setup_logging, write_csv
from synth_ops import (BACKGROUND, INNER_RING, INTERIOR, OUTER_RING, displacement_error_field, error_statistics,
                       list_cases, read_case, region_values, stddev_map)
from vsvf_ops import jacobian_determinant_stats

logger = logging.getLogger(__name__)

ERROR_HEADER = ("case", "stage", "region", "median", "q25", "q75", "mean")
JACOBIAN_HEADER = ("case", "stage", "mean", "std", "p1", "p5", "p50", "p95", "p99", "min")
STDDEV_HEADER = ("case", "region", "estimated", "truth")
STDDEV_REGIONS = {"background": BACKGROUND, "interior": INTERIOR, "inner": INNER_RING, "outer": OUTER_RING}


def load_estimate(run_dir):
    """Local map, global map and weights of a run directory, or of a synthetic case directory."""
    if not os.path.exists(os.path.join(run_dir, "phi_inv.bin")):
        if os.path.exists(os.path.join(run_dir, "gt_map.bin")):
            logger.info("Scoring the ground truth in %s", run_dir)
            case = read_case(run_dir)
            return case.gt_map, case.gt_map, case.gt_weights
        raise DataIOError(f"no registration results in {run_dir}")
    local = read_field(os.path.join(run_dir, "phi_inv.bin"))
    global_path = os.path.join(run_dir, "phi_inv_global.bin")
    global_map = read_field(global_path) if os.path.exists(global_path) else local
    _, weights = read_raw(os.path.join(run_dir, "weights.bin"))
    return local, global_map, weights


def evaluate_case(name, run_dir, truth_dir, spec, out_dir, pooled):
    truth = read_case(truth_dir)
    local, global_map, weights = load_estimate(run_dir)
    error_rows, jacobian_rows, stddev_rows = [], [], []

    for stage, estimate in (("global", global_map), ("local", local)):
        error = displacement_error_field(estimate, truth.gt_map)
        for region, values in region_values(error, truth.target_labels).items():
            if values.size == 0:
                continue
            pooled[(stage, region)].append(values)
            error_rows.append({"case": name, "stage": stage, "region": region, **error_statistics(values)})
        jacobian_rows.append({"case": name, "stage": stage, **jacobian_determinant_stats(estimate)})

    estimated = stddev_map(weights, spec)
    if estimated.grid != truth.gt_map.grid:
        estimated = resample(estimated, truth.gt_map.grid)
    true_stddev = stddev_map(truth.gt_weights, spec)
    for region, code in STDDEV_REGIONS.items():
        mask = truth.source_labels == code
        if not np.any(mask):
            continue
        stddev_rows.append({"case": name, "region": region, "estimated": float(estimated.values[mask].mean()),
                            "truth": float(true_stddev.values[mask].mean())})

    write_heatmap(os.path.join(out_dir, f"{name}_stddev.pgm"), estimated.values)
    write_heatmap(os.path.join(out_dir, f"{name}_stddev_truth.pgm"), true_stddev.values)
    for i, w in enumerate(weights):
        write_heatmap(os.path.join(out_dir, f"{name}_weights_{i}.pgm"), w)
    return error_rows, jacobian_rows, stddev_rows


def _pooled_stddev(rows):
    pooled = []
    for region in STDDEV_REGIONS:
        picked = [r for r in rows if r["region"] == region]
        if picked:
            pooled.append({"case": "ALL", "region": region,
                           "estimated": float(np.mean([r["estimated"] for r in picked])),
                           "truth": float(np.mean([r["truth"] for r in picked]))})
    return pooled


def main(argv=None):
    parser = argparse.ArgumentParser(description="Evaluate registrations against synthetic ground truth")
    parser.add_argument("--runs", required=True, help="Directory with one result directory per case")
    parser.add_argument("--truth", required=True, help="Synthetic corpus directory")
    parser.add_argument("--out", required=True, help="Report directory")
    parser.add_argument("--config", help="Configuration file")
    parser.add_argument("--debug", action="store_true", help="Enable debug output")
    args = parser.parse_args(argv)
    setup_logging(args.debug)

    config = load_config(args.config)
    ensure_dir(args.out)
    config_hash = write_config(args.out, config)

    names = list_cases(args.truth)
    errors, jacobians, stddevs = [], [], []
    pooled = defaultdict(list)
    for index, name in enumerate(names):
        e, j, s = evaluate_case(name, os.path.join(args.runs, name), os.path.join(args.truth, name),
                                config.kernels, args.out, pooled)
        errors.extend(e)
        jacobians.extend(j)
        stddevs.extend(s)
        print_flush(f"Evaluated case {index + 1} of {len(names)}")

    for (stage, region), parts in pooled.items():
        errors.append({"case": "ALL", "stage": stage, "region": region,
                       **error_statistics(np.concatenate(parts))})
    stddevs.extend(_pooled_stddev(stddevs))

    write_csv(os.path.join(args.out, "displacement_errors.csv"), ERROR_HEADER, errors, config_hash)
    write_csv(os.path.join(args.out, "jacobian_stats.csv"), JACOBIAN_HEADER, jacobians, config_hash)
    write_csv(os.path.join(args.out, "stddev_regions.csv"), STDDEV_HEADER, stddevs, config_hash)

    folded = sum(1 for r in jacobians if r["stage"] == "local" and r["min"] <= 0)
    for row in errors:
        if row["case"] == "ALL" and row["region"] in ("inner", "outer"):
            print_flush(f"{row['stage']:>6} {row['region']:>5}: median displacement error {row['median']:.3f} px")
    print_flush(f"{folded} of {len(names)} local maps fold")


if __name__ == "__main__":
    sys.exit(run_command(main))
