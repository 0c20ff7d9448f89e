"""
run_config.py: Run configuration for the registration commands

A configuration file has one INI section per module; every key is optional
and falls back to the module default:

    [run]        seed, jobs
    [kernels]    sigmas, setpoint_weights, omt_power, preweight_smoothing_sigma, preweight_floor
    [regressor]  hidden_channels, kernel_size, negative_slope, ...
    [vsvf]       reg_weight, omt_weight, tv_weight, rk4_steps, ...
    [optimizer]  nesterov_momentum, lr_individual, lr_shared, ...
    [synthdata]  size, outer_radius_range, ...

Tuples are comma separated. Unknown sections and keys are errors. The
environment variable MREG_SEED overrides ``[run] seed``.
"""

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass

from kernel_ops import MultiGaussianSpec
from optimizer_ops import OptimizerConfig
from regressor_ops import RegressorConfig
from run_utils import ConfigError, DataIOError, MregError, text_hash
from synth_ops import SynthConfig
from vsvf_ops import VsvfConfig

logger = logging.getLogger(__name__)

SEED_ENV = "MREG_SEED"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")


SECTIONS = {
    "run": RunSection,
    "kernels": MultiGaussianSpec,
    "regressor": RegressorConfig,
    "vsvf": VsvfConfig,
    "optimizer": OptimizerConfig,
    "synthdata": SynthConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    kernels: MultiGaussianSpec = MultiGaussianSpec()
    regressor: RegressorConfig = RegressorConfig()
    vsvf: VsvfConfig = VsvfConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    synthdata: SynthConfig = SynthConfig()

    def text(self):
        """The resolved configuration in the file syntax it was read from."""
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in dataclasses.fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return text_hash(self.text())

    def replace(self, section, **changes):
        """Copy with fields of one section changed; invalid values raise ConfigError."""
        try:
            updated = dataclasses.replace(getattr(self, section), **changes)
        except MregError as e:
            raise ConfigError(f"[{section}] {e}") from e
        return dataclasses.replace(self, **{section: updated})


def _format_value(value):
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(section, key, kind, raw):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            if raw.lower() in ("", "none", "default"):
                return None
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e


def _build_section(name, items):
    cls = SECTIONS[name]
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items:
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        value = _parse_value(name, key, kinds[key], raw)
        if value is not None:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except MregError as e:
        raise ConfigError(f"[{name}] {e}") from e


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section [{unknown[0]}]")
    sections = {name: _build_section(name, parser.items(name)) for name in parser.sections()}
    return RunConfig(**sections)


def load_config(path=None, environ=None):
    """Read ``path`` (or use defaults) and apply the MREG_SEED override."""
    environ = os.environ if environ is None else environ
    if path is None:
        config = RunConfig()
    else:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise DataIOError(f"cannot read config {path}: {e}") from e
        config = parse_config(text, source=path)

    if environ.get(SEED_ENV):
        try:
            seed = int(environ[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from e
        config = config.replace("run", seed=seed)
        logger.debug("seed overridden by %s: %d", SEED_ENV, seed)
    return config


def write_config(directory, config):
    """Echo the resolved configuration as ``config.txt``; returns its hash."""
    path = os.path.join(directory, "config.txt")
    try:
        with open(path, "w") as f:
            f.write(config.text())
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e
    return config.hash()
