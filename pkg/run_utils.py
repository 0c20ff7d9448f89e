# run_utils.py
"""Shared plumbing for the registration commands: errors, logging, CSV output."""

import csv
import hashlib
import logging
import os
import sys

logger = logging.getLogger(__name__)


class MregError(Exception):
    """Base class for all errors raised by the registration toolkit."""
    code = "E_INTERNAL"
    exit_status = 1


class ConfigError(MregError):
    code = "E_CONFIG"
    exit_status = 2


class InvalidParameter(MregError):
    """Raised for out-of-range arguments.

    ``kind`` is one of ``invalid-parameter``, ``invalid-weights`` or
    ``invalid-spec``.
    """
    code = "E_PARAM"
    exit_status = 2

    def __init__(self, message, kind="invalid-parameter"):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class DivergenceError(MregError):
    code = "E_DIVERGENCE"
    exit_status = 3

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DataIOError(MregError):
    code = "E_IO"
    exit_status = 4


class StaleTapeError(MregError):
    code = "E_TAPE"
    exit_status = 1


def setup_logging(debug=False):
    """Send log records to stderr; DEBUG level when ``debug`` is set."""
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def print_flush(message):
    """Print a message and flush the output."""
    print(message, flush=True)


def run_command(main, argv=None):
    """Run a command's ``main`` and map toolkit errors to exit statuses.

    Errors are reported as a single ``E_CODE: message`` line on stderr.
    """
    try:
        main(argv)
    except MregError as e:
        print(f"{e.code}: {e}", file=sys.stderr, flush=True)
        return e.exit_status
    except OSError as e:
        print(f"{DataIOError.code}: {e}", file=sys.stderr, flush=True)
        return DataIOError.exit_status
    return 0


def text_hash(text):
    """Short SHA-256 digest used to tag every output with its configuration."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create directory {path}: {e}") from e
    return path


def write_csv(path, header, rows, config_hash):
    """Write a CSV with a ``# config_hash=...`` comment line and a header row."""
    try:
        with open(path, "w", newline="") as f:
            f.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format_cell(v) for v in _row_values(row, header)])
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def read_csv(path):
    """Read a CSV written by ``write_csv``; returns (config_hash, list of dicts)."""
    try:
        with open(path, newline="") as f:
            first = f.readline()
            if not first.startswith("# config_hash="):
                raise DataIOError(f"{path}: missing config hash comment line")
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    return first.strip().split("=", 1)[1], rows


def _row_values(row, header):
    if isinstance(row, dict):
        return [row[k] for k in header]
    return list(row)


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


# independent random streams derived from one root seed:
# numpy.random.default_rng([seed, STREAM_*, counter, ...])
STREAM_SYNTH, STREAM_INIT, STREAM_BATCH, STREAM_GRADCHECK = range(4)
