"""
synth_ops.py: Synthetic concentric-ring registration pairs with known ground truth

Each case is built in five steps:
    1. three concentric circles with random radii split the square into an
       interior, an inner ring, an outer ring and the background; every region
       gets fixed multi-Gaussian pre-weights and an intensity
    2. momenta orthogonal to the circle boundaries, with a random sign in each
       of a number of random angular sectors, then smoothed
    3. a deformation from those momenta, smoothed with the ground-truth local
       weights and advected like any registration map
    4. smoothed noise is added to the ring image; image and pre-weights are
       deformed to give the source
    5. steps 2-4 again, starting from the noise-free deformed rings; the new
       deformation applied to the noisy source gives the target and is the
       ground truth of the pair

Label maps use: -1 border band, 0 background, 1 interior, 2 inner ring, 3 outer ring.

Case directory layout:
    source.pgm, target.pgm   16-bit images
    gt_map.bin               ground-truth inverse map, raw float64
    gt_weights_<i>.bin       ground-truth weights in the source frame
    masks.bin                label maps of source and target (2 components)
    manifest.txt             YAML: seed, radii, amplitudes, generation parameters
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

import kernel_ops
import vsvf_ops
from field_io import read_image, read_raw, write_field, write_pgm, write_raw
from field_ops import Grid, ScalarField, VectorField, compose_maps, gradient_values, resample, smooth_values
from run_utils import STREAM_SYNTH, DataIOError, DivergenceError, InvalidParameter, ensure_dir, print_flush

logger = logging.getLogger(__name__)

BORDER, BACKGROUND, INTERIOR, INNER_RING, OUTER_RING = -1, 0, 1, 2, 3
REGIONS = {"inner": (INNER_RING,), "outer": (OUTER_RING,), "all": (BACKGROUND, INTERIOR, INNER_RING, OUTER_RING)}
CENTER = (0.5, 0.5)


@dataclass(frozen=True)
class SynthConfig:
    size: int = 128
    outer_radius_range: tuple = (0.28, 0.40)
    ring_width_range: tuple = (0.06, 0.12)
    n_sectors: int = 10
    momentum_band: float = 0.02
    momentum_sigma: float = 0.02
    peak_displacement_px: float = 6.0
    noise_std: float = 0.05
    noise_sigma: float = 0.02
    background_weights: tuple = (0.0, 0.0, 0.0, 1.0)
    interior_weights: tuple = (0.0, 0.0, 0.0, 1.0)
    inner_ring_weights: tuple = (0.0, 0.1, 0.3, 0.6)
    outer_ring_weights: tuple = (0.05, 0.55, 0.3, 0.1)
    intensities: tuple = (0.1, 0.65, 0.35, 0.9)
    rk4_steps: int = 20
    max_retries: int = 20

    def __post_init__(self):
        if self.size < 64:
            raise InvalidParameter(f"synthetic cases need at least 64x64 nodes, got {self.size}")
        for name in ("background_weights", "interior_weights", "inner_ring_weights", "outer_ring_weights"):
            w = getattr(self, name)
            if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
                raise InvalidParameter(f"{name} must lie on the simplex, got {w}", "invalid-weights")
        if len(self.intensities) != 4:
            raise InvalidParameter("intensities needs one value per region (background, interior, inner, outer)")
        if self.n_sectors < 1 or self.max_retries < 1 or self.rk4_steps < 1:
            raise InvalidParameter("n_sectors, max_retries and rk4_steps must be >= 1")
        if min(self.momentum_band, self.momentum_sigma, self.noise_sigma) <= 0:
            raise InvalidParameter("momentum_band, momentum_sigma and noise_sigma must be positive")
        if self.peak_displacement_px < 0 or self.noise_std < 0:
            raise InvalidParameter("peak_displacement_px and noise_std must be nonnegative")

    def region_table(self):
        """Pre-weights indexed by label (background, interior, inner ring, outer ring)."""
        return np.array([self.background_weights, self.interior_weights,
                         self.inner_ring_weights, self.outer_ring_weights])


@dataclass
class SyntheticCase:
    source: ScalarField
    target: ScalarField
    gt_map: VectorField
    gt_weights: np.ndarray
    source_labels: np.ndarray
    target_labels: np.ndarray
    manifest: dict = field(default_factory=dict)


def _radius(points):
    return np.sqrt((points[0] - CENTER[0]) ** 2 + (points[1] - CENTER[1]) ** 2)


def _labels(radius, radii):
    r_in, r_mid, r_out = radii
    labels = np.full(radius.shape, BACKGROUND)
    labels[radius < r_out] = OUTER_RING
    labels[radius < r_mid] = INNER_RING
    labels[radius < r_in] = INTERIOR
    labels[0, :] = labels[-1, :] = labels[:, 0] = labels[:, -1] = BORDER
    return labels


def _region_values(labels, table):
    """Per-region values (rows of ``table``) spread over a label map; the border takes the background value."""
    index = np.where(labels == BORDER, BACKGROUND, labels)
    return np.moveaxis(np.asarray(table)[index], -1, 0) if np.ndim(table) == 2 else np.asarray(table)[index]


def _draw_radii(rng, params, grid):
    r_out = rng.uniform(*params.outer_radius_range)
    r_mid = r_out - rng.uniform(*params.ring_width_range)
    r_in = r_mid - rng.uniform(*params.ring_width_range)
    thinnest = min(r_in, r_mid - r_in, r_out - r_mid)
    return (r_in, r_mid, r_out), thinnest >= 3 * grid.spacing[0]


def _sector_momentum(rng, params, grid, radius, normals, angles, radii):
    """Momenta on bands around every boundary, signed per random angular sector."""
    cuts = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=params.n_sectors))
    signs = rng.choice([-1.0, 1.0], size=params.n_sectors)
    sector = np.searchsorted(cuts, np.mod(angles, 2.0 * np.pi)) % params.n_sectors
    band = np.zeros(grid.dims)
    for r in radii:
        band = np.maximum(band, (np.abs(radius - r) < params.momentum_band).astype(np.float64))
    m = normals * (band * signs[sector])
    return np.asarray(smooth_values(m, sigma=params.momentum_sigma, spacing=grid.spacing))


def _deformation(rng, params, spec, grid, momentum, weights):
    """Inverse map from a momentum, its velocity scaled to a random peak displacement."""
    v = np.asarray(kernel_ops.localized_smooth_values(momentum, weights, spec, grid.spacing))
    peak = np.max(np.sqrt(np.sum(v ** 2, axis=0)))
    target_peak = params.peak_displacement_px * grid.spacing[0] * rng.uniform(0.6, 1.0)
    if peak == 0 or target_peak == 0:
        v = np.zeros_like(v)
    else:
        v = v * (target_peak / peak)
    phi = VectorField(grid, vsvf_ops.advect_inverse_map_values(v, params.rk4_steps, grid))
    return phi, float(target_peak)


def _unit(vectors):
    norm = np.sqrt(np.sum(vectors ** 2, axis=0))
    return vectors / np.where(norm > 0, norm, 1.0)


def _attempt(rng, params, spec, grid):
    radii, ok = _draw_radii(rng, params, grid)
    if not ok:
        return None, "degenerate radii"
    table = params.region_table()
    x = grid.coordinates()
    radius = _radius(x)
    labels = _labels(radius, radii)
    image = _region_values(labels, np.array(params.intensities))
    preweights = _region_values(labels, table)
    weights = np.asarray(kernel_ops.make_local_weights(preweights, spec, grid, check=False).weights)

    # first deformation: momenta normal to the circles
    offset = x - np.reshape(CENTER, (2, 1, 1))
    angles = np.arctan2(offset[1], offset[0])
    m1 = _sector_momentum(rng, params, grid, radius, _unit(offset), angles, radii)
    phi1, peak1 = _deformation(rng, params, spec, grid, m1, weights)

    noise = np.asarray(smooth_values(rng.normal(size=grid.dims), sigma=params.noise_sigma, spacing=grid.spacing))
    std = noise.std()
    noise = noise * (params.noise_std / std) if std > 0 else noise
    source = vsvf_ops.warp(ScalarField(grid, image + noise), phi1)
    source_pre = np.stack([vsvf_ops.warp(ScalarField(grid, p), phi1).values for p in preweights])
    source_weights = np.asarray(kernel_ops.make_local_weights(source_pre, spec, grid, check=False).weights)

    # second deformation starts from the noise-free deformed rings
    pulled = phi1.values - np.reshape(CENTER, (2, 1, 1))
    radius1 = _radius(phi1.values)
    normals1 = _unit(gradient_values(radius1, spacing=grid.spacing))
    m2 = _sector_momentum(rng, params, grid, radius1, normals1, np.arctan2(pulled[1], pulled[0]), radii)
    phi2, peak2 = _deformation(rng, params, spec, grid, m2, source_weights)

    target = vsvf_ops.warp(source, phi2)
    for name, phi in (("first", phi1), ("second", phi2)):
        det_min = float(np.min(vsvf_ops.jacobian_determinants(phi)))
        if det_min <= 0:
            return None, f"{name} deformation folds (min det {det_min:.3g})"

    composed = compose_maps(phi1, phi2)
    case = SyntheticCase(
        source=source,
        target=target,
        gt_map=phi2,
        gt_weights=source_weights,
        source_labels=_labels(radius1, radii),
        target_labels=_labels(_radius(composed.values), radii),
        manifest={
            "radii": [float(r) for r in radii],
            "peak_displacement": [peak1, peak2],
        },
    )
    return case, None


def generate_case(seed, spec, params, index=0):
    """One synthetic pair; deterministic in ``(seed, index)``."""
    grid = Grid((params.size, params.size))
    if spec.n != len(params.outer_ring_weights):
        raise InvalidParameter(f"region weights have {len(params.outer_ring_weights)} entries "
                               f"but the kernel has {spec.n} Gaussians", "invalid-spec")
    for attempt in range(params.max_retries):
        rng = np.random.default_rng([seed, STREAM_SYNTH, index, attempt])
        case, reason = _attempt(rng, params, spec, grid)
        if case is not None:
            case.manifest.update(seed=int(seed), index=int(index), attempt=attempt)
            return case
        logger.debug("case %d attempt %d rejected: %s", index, attempt, reason)
    raise DivergenceError(f"no valid synthetic case after {params.max_retries} attempts (last: {reason})")


def case_name(index):
    return f"case_{index:04d}"


def write_case(directory, case, params, spec):
    ensure_dir(directory)
    grid = case.source.grid
    write_pgm(os.path.join(directory, "source.pgm"), case.source.values, bits=16)
    write_pgm(os.path.join(directory, "target.pgm"), case.target.values, bits=16)
    write_field(os.path.join(directory, "gt_map.bin"), case.gt_map)
    for i, w in enumerate(case.gt_weights):
        write_raw(os.path.join(directory, f"gt_weights_{i}.bin"), w, grid)
    write_raw(os.path.join(directory, "masks.bin"),
              np.stack([case.source_labels, case.target_labels]).astype(np.float64), grid)
    manifest = dict(case.manifest, generation=_params_dict(params), sigmas=list(spec.sigmas))
    try:
        with open(os.path.join(directory, "manifest.txt"), "w") as f:
            yaml.safe_dump(manifest, f, default_flow_style=False, sort_keys=True)
    except OSError as e:
        raise DataIOError(f"cannot write manifest in {directory}: {e}") from e


def _params_dict(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(params).items()}


@dataclass
class CaseFiles:
    """A case as read back from disk."""
    name: str
    source: ScalarField
    target: ScalarField
    gt_map: VectorField
    gt_weights: np.ndarray
    source_labels: np.ndarray
    target_labels: np.ndarray


def read_case(directory):
    source = read_image(os.path.join(directory, "source.pgm"))
    target = read_image(os.path.join(directory, "target.pgm"))
    grid, gt_map = read_raw(os.path.join(directory, "gt_map.bin"))
    weights = []
    while os.path.exists(os.path.join(directory, f"gt_weights_{len(weights)}.bin")):
        weights.append(read_raw(os.path.join(directory, f"gt_weights_{len(weights)}.bin"))[1])
    _, masks = read_raw(os.path.join(directory, "masks.bin"))
    if masks.shape[0] != 2:
        raise DataIOError(f"{directory}: masks.bin must hold source and target label maps")
    return CaseFiles(os.path.basename(os.path.normpath(directory)), source, target, VectorField(grid, gt_map),
                     np.array(weights), np.rint(masks[0]).astype(int), np.rint(masks[1]).astype(int))


def list_cases(corpus_dir):
    try:
        names = sorted(n for n in os.listdir(corpus_dir) if os.path.isdir(os.path.join(corpus_dir, n)))
    except OSError as e:
        raise DataIOError(f"cannot list corpus {corpus_dir}: {e}") from e
    if not names:
        raise DataIOError(f"corpus {corpus_dir} holds no cases")
    return names


def generate_corpus(n_cases, seed, spec, params, out_dir=None, jobs=1):
    """``n_cases`` independent cases; writes them and a corpus manifest when ``out_dir`` is given."""
    if n_cases < 1:
        raise InvalidParameter(f"corpus size must be >= 1, got {n_cases}")

    def one(index):
        case = generate_case(seed, spec, params, index)
        if out_dir is not None:
            write_case(os.path.join(out_dir, case_name(index)), case, params, spec)
        return case

    if out_dir is not None:
        ensure_dir(out_dir)
    cases = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cases = list(pool.map(one, range(n_cases)))
    else:
        for index in range(n_cases):
            cases.append(one(index))
            print_flush(f"Generated case {index + 1} of {n_cases}")

    manifest = {
        "seed": int(seed),
        "n_cases": int(n_cases),
        "cases": [{"name": case_name(i), "attempt": c.manifest["attempt"], "radii": c.manifest["radii"]}
                  for i, c in enumerate(cases)],
        "generation": _params_dict(params),
        "sigmas": list(spec.sigmas),
    }
    if out_dir is not None:
        try:
            with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
                yaml.safe_dump(manifest, f, default_flow_style=False, sort_keys=True)
        except OSError as e:
            raise DataIOError(f"cannot write corpus manifest: {e}") from e
    return cases, manifest


# evaluation helpers

def displacement_error_field(estimated, truth):
    """Pointwise Euclidean displacement difference in pixels, on the grid of ``truth``."""
    if estimated.grid != truth.grid:
        estimated = resample(estimated, truth.grid)
    spacing = np.reshape(truth.grid.spacing, (-1,) + (1,) * truth.grid.ndim)
    return np.sqrt(np.sum(((estimated.values - truth.values) / spacing) ** 2, axis=0))


def region_values(values, labels):
    """Samples of ``values`` per evaluation region (inner ring, outer ring, every labelled node)."""
    return {region: values[np.isin(labels, codes)] for region, codes in REGIONS.items()}


def error_statistics(values):
    q25, median, q75 = np.percentile(values, [25, 50, 75])
    return {"median": float(median), "q25": float(q25), "q75": float(q75), "mean": float(np.mean(values))}


def displacement_error(estimated, truth, labels):
    """Per-region displacement error statistics in pixels.

    ``estimated`` is resampled to the grid of ``truth`` when they differ.
    Returns ``{region: {median, q25, q75, mean}}`` for the inner ring, the
    outer ring and every labelled node.
    """
    error = displacement_error_field(estimated, truth)
    return {region: error_statistics(values)
            for region, values in region_values(error, labels).items() if values.size}


def stddev_map(lw, spec):
    """sigma(x) = sqrt(sum_i w_i(x) sigma_i^2) from LocalWeights or a weight stack."""
    weights = np.asarray(lw.weights if isinstance(lw, kernel_ops.LocalWeights) else lw)
    grid = lw.grid if isinstance(lw, kernel_ops.LocalWeights) else Grid(weights.shape[1:])
    var = np.reshape(np.square(spec.sigmas), (-1,) + (1,) * grid.ndim)
    return ScalarField(grid, np.sqrt(np.sum(weights * var, axis=0)))
