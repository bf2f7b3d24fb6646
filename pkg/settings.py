# Run configuration
# One YAML document with a section per component and a top-level seed. Each
# section maps onto the dataclass its module owns; every parse error names the
# dotted key path and the line it came from.

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, Union, get_args, get_origin, get_type_hints

import yaml

from cem_planner import CemConfig
from cvae import CvaeConfig
from didactic_sim import SimConfig
from errors import ConfigError, InvalidParameterError, require
from metrics_experiments import ExperimentConfig
from risk_biaser import BiasTrainConfig
from ttc_cost import TtcParams

logger = logging.getLogger(__name__)


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True)
class PathsConfig:
    output_dir: str = "runs/default"  # every artifact of the run lives under here

    def __post_init__(self):
        require(bool(self.output_dir.strip()), "output_dir", "must not be empty")


@dataclass(frozen=True)
class RunConfig:
    """Complete configuration of a pipeline run."""
    sim: SimConfig = field(default_factory=SimConfig)
    ttc: TtcParams = field(default_factory=TtcParams)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    biaser: BiasTrainConfig = field(default_factory=BiasTrainConfig)
    planner: CemConfig = field(default_factory=CemConfig)
    experiments: ExperimentConfig = field(default_factory=ExperimentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        return self if seed is None else dataclasses.replace(self, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {name: _section_to_dict(getattr(self, name)) for name in SECTIONS}
        out["seed"] = self.seed
        return out


SECTIONS: Dict[str, Type] = {
    "sim": SimConfig,
    "ttc": TtcParams,
    "cvae": CvaeConfig,
    "biaser": BiasTrainConfig,
    "planner": CemConfig,
    "experiments": ExperimentConfig,
    "paths": PathsConfig,
}


# ============================================================================
# SERIALISATION
# ============================================================================

def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _section_to_dict(section: Any) -> Dict[str, Any]:
    return {f.name: _plain(getattr(section, f.name)) for f in dataclasses.fields(section)}


def dump_config(config: RunConfig) -> str:
    """YAML text that parses back to an equal RunConfig."""
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=False)


def write_config(config: RunConfig, path: Union[str, Path]):
    Path(path).write_text(dump_config(config), encoding="utf-8")


# ============================================================================
# PARSING
# ============================================================================

def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _coerce(value: Any, hint: Any, key: str, line: int) -> Any:
    """Convert a YAML value to the field type named by ``hint``."""
    if get_origin(hint) in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}", line)
        item_hint = get_args(hint)[0]
        return tuple(_coerce(v, item_hint, key, line) for v in value)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            allowed = ", ".join(m.value for m in hint)
            raise ConfigError(key, f"expected one of {allowed}, got {value!r}", line) from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}", line)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}", line)
        return value
    if hint is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                raise ConfigError(key, f"expected a number, got {value!r}", line) from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}", line)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}", line)
        return value
    return value


def _build_section(name: str, cls: Type, node: yaml.Node, loader: yaml.SafeLoader) -> Any:
    if isinstance(node, yaml.ScalarNode) and loader.construct_object(node) is None:
        return cls()
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(name, "expected a mapping of settings", _line(node))
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for key_node, value_node in node.value:
        key = key_node.value
        path = f"{name}.{key}"
        if key not in known:
            raise ConfigError(path, "unknown key", _line(key_node))
        if key in values:
            raise ConfigError(path, "duplicate key", _line(key_node))
        values[key] = _coerce(loader.construct_object(value_node, deep=True), hints[key], path, _line(value_node))
        lines[key] = _line(key_node)
    try:
        return cls(**values)
    except InvalidParameterError as e:
        raise ConfigError(f"{name}.{e.field}", str(e), lines.get(e.field, _line(node))) from e


def load_config_text(text: str) -> RunConfig:
    """Parse YAML text; an empty document gives the all-defaults config."""
    loader = yaml.SafeLoader(text)
    try:
        root = loader.get_single_node()
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else None
        raise ConfigError("<document>", str(e.problem or e), line) from e
    try:
        if root is None:
            return RunConfig()
        if not isinstance(root, yaml.MappingNode):
            raise ConfigError("<document>", "expected a mapping of sections", _line(root))
        sections: Dict[str, Any] = {}
        for key_node, value_node in root.value:
            key = key_node.value
            if key in sections:
                raise ConfigError(key, "duplicate key", _line(key_node))
            if key == "seed":
                seed = _coerce(loader.construct_object(value_node), int, "seed", _line(value_node))
                if seed < 0:
                    raise ConfigError("seed", f"must be non-negative, got {seed}", _line(value_node))
                sections["seed"] = seed
            elif key in SECTIONS:
                sections[key] = _build_section(key, SECTIONS[key], value_node, loader)
            else:
                raise ConfigError(key, "unknown key", _line(key_node))
        return RunConfig(**sections)
    finally:
        loader.dispose()


def parse_config(path: Union[str, Path, None]) -> RunConfig:
    """Read and validate a config file; None gives the defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    config = load_config_text(text)
    logger.debug("loaded config %s (seed %d)", path, config.seed)
    return config
