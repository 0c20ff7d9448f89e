import os

import numpy as np
import pytest
import yaml

import synth_ops
import vsvf_ops
from field_ops import Grid, VectorField
from kernel_ops import LocalWeights, MultiGaussianSpec, constant_local_weights
from run_utils import InvalidParameter
from synth_ops import SynthConfig

SPEC = MultiGaussianSpec()
SMALL = SynthConfig(size=64)


@pytest.fixture(scope="module")
def case():
    return synth_ops.generate_case(0, SPEC, SMALL)


def test_config_validation():
    for changes in ({"size": 32}, {"outer_ring_weights": (0.5, 0.5, 0.5, 0.0)}, {"intensities": (0.1, 0.2)},
                    {"n_sectors": 0}, {"noise_sigma": 0.0}, {"peak_displacement_px": -1.0}):
        with pytest.raises(InvalidParameter):
            SynthConfig(**changes)


def test_default_region_table():
    table = SynthConfig().region_table()
    np.testing.assert_array_equal(table[:2], [[0.0, 0.0, 0.0, 1.0]] * 2)
    np.testing.assert_array_equal(table[2], [0.0, 0.1, 0.3, 0.6])
    np.testing.assert_array_equal(table[3], [0.05, 0.55, 0.3, 0.1])
    interior, inner, outer = table[synth_ops.INTERIOR], table[synth_ops.INNER_RING], table[synth_ops.OUTER_RING]
    assert not np.array_equal(interior, inner)
    assert not np.array_equal(inner, outer)
    assert not np.array_equal(interior, outer)


def test_ring_standard_deviations_decrease_outwards():
    grid = Grid((8, 8))
    config = SynthConfig()
    values = [synth_ops.stddev_map(constant_local_weights(SPEC, grid, w), SPEC).values[0, 0]
              for w in (config.interior_weights, config.inner_ring_weights, config.outer_ring_weights)]
    assert values[0] > values[1] > values[2]


def test_cases_are_deterministic(case):
    again = synth_ops.generate_case(0, SPEC, SMALL)
    np.testing.assert_array_equal(again.source.values, case.source.values)
    np.testing.assert_array_equal(again.target.values, case.target.values)
    np.testing.assert_array_equal(again.gt_map.values, case.gt_map.values)
    assert again.manifest == case.manifest
    other = synth_ops.generate_case(0, SPEC, SMALL, index=1)
    assert not np.array_equal(other.source.values, case.source.values)


def test_case_contents(case):
    grid = Grid((64, 64))
    assert case.source.grid == case.target.grid == case.gt_map.grid == grid
    assert case.gt_weights.shape == (4, 64, 64)
    np.testing.assert_allclose(case.gt_weights.sum(axis=0), 1.0, atol=1e-12)
    assert set(np.unique(case.source_labels)) <= {-1, 0, 1, 2, 3}
    assert {2, 3} <= set(np.unique(case.target_labels))
    assert np.all(case.source_labels[0] == -1) and np.all(case.target_labels[:, -1] == -1)
    r_in, r_mid, r_out = case.manifest["radii"]
    assert 0 < r_in < r_mid < r_out <= 0.40
    for peak in case.manifest["peak_displacement"]:
        assert 0.6 * 6 / 63 <= peak <= 6 / 63


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_ground_truth_maps_do_not_fold(seed):
    gt = synth_ops.generate_case(seed, SPEC, SMALL).gt_map
    assert np.min(vsvf_ops.jacobian_determinants(gt)) > 0


def test_zero_displacement_gives_an_identity_pair():
    params = SynthConfig(size=64, peak_displacement_px=0.0)
    case = synth_ops.generate_case(5, SPEC, params)
    np.testing.assert_array_equal(case.gt_map.values, case.gt_map.grid.coordinates())
    np.testing.assert_array_equal(case.target.values, case.source.values)
    np.testing.assert_array_equal(case.source_labels, case.target_labels)


def test_region_weights_must_match_the_kernel():
    with pytest.raises(InvalidParameter):
        synth_ops.generate_case(0, MultiGaussianSpec(sigmas=(0.05, 0.1, 0.2)), SMALL)


# standard deviation maps

def test_stddev_map_of_a_single_gaussian():
    weights = np.zeros((4, 8, 8))
    weights[3] = 1.0
    np.testing.assert_allclose(synth_ops.stddev_map(weights, SPEC).values, 0.2, rtol=1e-15)


def test_stddev_map_of_the_setpoint_and_the_outer_ring():
    grid = Grid((8, 8))
    sigmas = np.array(SPEC.sigmas)
    lw = constant_local_weights(SPEC, grid)
    expected = np.sqrt(np.sum(sigmas ** 4) / np.sum(sigmas ** 2))
    np.testing.assert_allclose(synth_ops.stddev_map(lw, SPEC).values, expected, rtol=1e-12)

    ring = constant_local_weights(SPEC, grid, SynthConfig().outer_ring_weights)
    expected = np.sqrt(0.05 * 1e-4 + 0.55 * 0.0025 + 0.3 * 0.01 + 0.1 * 0.04)
    np.testing.assert_allclose(synth_ops.stddev_map(ring, SPEC).values, expected, rtol=1e-12)
    assert isinstance(ring, LocalWeights)


# displacement error

def test_displacement_error_in_pixels():
    grid = Grid((9, 9))
    truth = VectorField.identity(grid)
    labels = np.full(grid.dims, synth_ops.INNER_RING)
    labels[:, 5:] = synth_ops.OUTER_RING

    zero = synth_ops.displacement_error(truth, truth, labels)
    assert set(zero) == {"inner", "outer", "all"}
    assert all(stats["median"] == 0.0 for stats in zero.values())

    shifted = VectorField(grid, grid.coordinates() + np.reshape([1.0 / 8, 0.0], (2, 1, 1)))
    stats = synth_ops.displacement_error(shifted, truth, labels)
    for region in stats.values():
        assert region["median"] == pytest.approx(1.0)
        assert region["q25"] == pytest.approx(1.0) and region["q75"] == pytest.approx(1.0)


def test_displacement_error_resamples_a_coarse_estimate():
    truth = VectorField.identity(Grid((17, 17)))
    labels = np.full((17, 17), synth_ops.INTERIOR)
    stats = synth_ops.displacement_error(VectorField.identity(Grid((9, 9))), truth, labels)
    assert set(stats) == {"all"}
    assert stats["all"]["median"] == pytest.approx(0.0, abs=1e-10)


# files

def test_case_files_round_trip(tmp_path, case):
    synth_ops.write_case(str(tmp_path / "case"), case, SMALL, SPEC)
    back = synth_ops.read_case(str(tmp_path / "case"))
    assert back.name == "case"
    np.testing.assert_allclose(back.source.values, np.clip(case.source.values, 0, 1), atol=1e-5)
    np.testing.assert_allclose(back.target.values, np.clip(case.target.values, 0, 1), atol=1e-5)
    np.testing.assert_array_equal(back.gt_map.values, case.gt_map.values)
    np.testing.assert_array_equal(back.gt_weights, case.gt_weights)
    np.testing.assert_array_equal(back.source_labels, case.source_labels)
    np.testing.assert_array_equal(back.target_labels, case.target_labels)

    with open(tmp_path / "case" / "manifest.txt") as f:
        manifest = yaml.safe_load(f)
    assert manifest["seed"] == 0
    assert manifest["generation"]["size"] == 64
    assert manifest["sigmas"] == list(SPEC.sigmas)


def test_generate_corpus_writes_cases_and_a_manifest(tmp_path):
    out = str(tmp_path / "corpus")
    cases, manifest = synth_ops.generate_corpus(2, 9, SPEC, SMALL, out_dir=out)
    assert len(cases) == 2
    assert synth_ops.list_cases(out) == ["case_0000", "case_0001"]
    with open(os.path.join(out, "manifest.txt")) as f:
        assert yaml.safe_load(f) == manifest
    assert [c["name"] for c in manifest["cases"]] == ["case_0000", "case_0001"]
    assert manifest["n_cases"] == 2 and manifest["seed"] == 9
    with pytest.raises(InvalidParameter):
        synth_ops.generate_corpus(0, 9, SPEC, SMALL)
