"""
field_io.py: Reading and writing fields

Two formats:
    - PGM (8 or 16 bit, 2D scalar images) through Pillow; intensities are
      mapped to [0,1] on load by the format's full scale
    - raw float64: one ASCII header line ``dims d n0 n1 [n2] [comps c]``
      followed by little-endian float64 samples in C order; ``comps`` is
      present for multi-component arrays (vector fields, weight stacks, masks)
"""

import logging
import os

import numpy as np
from PIL import Image

from field_ops import Grid, ScalarField, VectorField
from run_utils import DataIOError, InvalidParameter

logger = logging.getLogger(__name__)

_SIXTEEN_BIT_MODES = ("I", "I;16", "I;16B", "I;16L")


def read_pgm(path):
    """Load a PGM image as a ScalarField with intensities in [0,1]."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            data = np.asarray(img)
    except (OSError, ValueError) as e:
        raise DataIOError(f"cannot read image {path}: {e}") from e
    if data.ndim != 2:
        raise DataIOError(f"{path}: expected a single-channel image, got mode {mode}")
    scale = 65535.0 if mode in _SIXTEEN_BIT_MODES else 255.0
    values = np.clip(data.astype(np.float64) / scale, 0.0, 1.0)
    return ScalarField(Grid(values.shape), values)


def write_pgm(path, values, bits=8):
    """Write a 2D array with values in [0,1] as an 8- or 16-bit PGM."""
    values = np.asarray(values.values if isinstance(values, ScalarField) else values, dtype=np.float64)
    if values.ndim != 2:
        raise InvalidParameter(f"PGM output needs a 2D array, got shape {values.shape}")
    values = np.clip(values, 0.0, 1.0)
    if bits == 8:
        img = Image.fromarray(np.round(values * 255.0).astype(np.uint8), mode="L")
    elif bits == 16:
        img = Image.fromarray(np.round(values * 65535.0).astype(np.int32), mode="I")
    else:
        raise InvalidParameter(f"PGM bit depth must be 8 or 16, got {bits}")
    try:
        img.save(path, format="PPM")
    except OSError as e:
        raise DataIOError(f"cannot write image {path}: {e}") from e


def write_heatmap(path, values):
    """Min-max scaled 8-bit PGM rendering of a 2D array."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    write_pgm(path, scaled, bits=8)
    return lo, hi


def write_raw(path, values, grid):
    """Write an array whose trailing axes are ``grid.dims``; leading axes are flattened into components."""
    values = np.ascontiguousarray(values, dtype="<f8")
    lead = values.shape[:values.ndim - grid.ndim]
    if values.shape[values.ndim - grid.ndim:] != grid.dims:
        raise InvalidParameter(f"array of shape {values.shape} does not end with grid dims {grid.dims}")
    header = f"dims {grid.ndim} " + " ".join(str(n) for n in grid.dims)
    if lead:
        header += f" comps {int(np.prod(lead))}"
    try:
        with open(path, "wb") as f:
            f.write((header + "\n").encode("ascii"))
            f.write(values.tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def read_raw(path):
    """Read a raw float64 file; returns ``(Grid, array)`` with components on the first axis."""
    try:
        with open(path, "rb") as f:
            header = f.readline().decode("ascii", errors="replace").split()
            payload = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    try:
        if header[0] != "dims":
            raise ValueError("header must start with 'dims'")
        d = int(header[1])
        dims = tuple(int(n) for n in header[2:2 + d])
        rest = header[2 + d:]
        comps = int(rest[1]) if rest[:1] == ["comps"] else None
    except (IndexError, ValueError) as e:
        raise DataIOError(f"{path}: malformed raw header {' '.join(header)!r}: {e}") from e
    shape = dims if comps is None else (comps,) + dims
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise DataIOError(f"{path}: expected {expected} bytes of float64 data, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return Grid(dims), values


def write_field(path, field):
    write_raw(path, field.values, field.grid)


def read_field(path):
    """Read a raw file as a ScalarField or, when it has d components, a VectorField."""
    grid, values = read_raw(path)
    if values.ndim == grid.ndim:
        return ScalarField(grid, values)
    if values.shape[0] == grid.ndim:
        return VectorField(grid, values)
    raise DataIOError(f"{path}: {values.shape[0]} components do not form a scalar or vector field")


def read_image(path):
    """Load a source/target image from PGM or raw float64."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".pnm"):
        return read_pgm(path)
    grid, values = read_raw(path)
    if values.ndim != grid.ndim:
        raise DataIOError(f"{path}: an image must have a single component")
    return ScalarField(grid, values)
