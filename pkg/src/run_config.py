"""
Run Configuration

RunConfig gathers every setting of the CLI commands. Settings are layered:

    config/defaults.yaml  <  --config FILE  <  environment (.env)  <  CLI flags

Unknown keys at any layer are a ConfigurationError naming the key.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from error_handling import ConfigurationError, ErrorSeverity, LinProbitError, log_error
from estimators import EstimatorId, SolverConfig
from reporting import FORMATS

logger = logging.getLogger("linprobit.config")

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
DEFAULTS_PATH = CONFIG_DIR / "defaults.yaml"
FULL_GIBBS_SAMPLES = 50000
FULL_GIBBS_BURN_IN = 20000


def _load_yaml(path: Path) -> Dict[str, Any]:
    """Load a YAML mapping, as a CRITICAL ConfigurationError on failure."""
    try:
        with open(path, "r", encoding="utf-8") as file:
            data = yaml.safe_load(file)
    except FileNotFoundError:
        error = ConfigurationError(
            f"Configuration file not found: {path}",
            severity=ErrorSeverity.CRITICAL,
            details={"path": str(path)},
        )
        log_error(error)
        raise error
    except yaml.YAMLError as e:
        error = ConfigurationError(
            f"Invalid YAML in configuration file: {path}",
            severity=ErrorSeverity.CRITICAL,
            details={"path": str(path), "error": str(e)},
        )
        log_error(error)
        raise error
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Configuration file {path} must contain a mapping")
    return data


def _parse_estimators(values: Any, key: str) -> Tuple[EstimatorId, ...]:
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    try:
        parsed = tuple(EstimatorId.parse(str(v)) for v in values)
    except LinProbitError as e:
        raise ConfigurationError(f"{key}: {e.message}", details={"key": key})
    if not parsed:
        raise ConfigurationError(f"{key}: at least one estimator is required")
    return tuple(dict.fromkeys(parsed))


def _number(value: Any, kind: type, key: str):
    if isinstance(value, bool):
        raise ConfigurationError(f"{key} must be a number, got {value!r}", details={"key": key})
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"{key} must be {kind.__name__}, got {value!r}", details={"key": key}
        )


@dataclass(frozen=True)
class SyntheticSettings:
    configurations: Tuple[Tuple[int, int], ...] = (
        (10, 5),
        (50, 5),
        (200, 5),
        (10, 20),
        (50, 20),
        (200, 20),
    )
    sigma_x_sq: float = 1.0
    snr_grid_db: Tuple[float, ...] = tuple(float(s) for s in range(-20, 21, 5))
    trials: int = 100
    smoothing: float = 0.0
    prior_correlation: float = 0.0
    estimators: Tuple[EstimatorId, ...] = tuple(EstimatorId)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SyntheticSettings":
        key = "synthetic.configurations"
        try:
            configurations = tuple(
                (_number(m, int, key), _number(n, int, key)) for m, n in data["configurations"]
            )
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key} must be a list of [M, N] pairs")
        settings = cls(
            configurations=configurations,
            sigma_x_sq=_number(data["sigma_x_sq"], float, "synthetic.sigma_x_sq"),
            snr_grid_db=tuple(
                _number(s, float, "synthetic.snr_grid_db") for s in data["snr_grid_db"]
            ),
            trials=_number(data["trials"], int, "synthetic.trials"),
            smoothing=_number(data["smoothing"], float, "synthetic.smoothing"),
            prior_correlation=_number(
                data["prior_correlation"], float, "synthetic.prior_correlation"
            ),
            estimators=_parse_estimators(data["estimators"], "synthetic.estimators"),
        )
        settings.validate()
        return settings

    def validate(self) -> None:
        if not self.configurations or any(m < 1 or n < 1 for m, n in self.configurations):
            raise ConfigurationError("synthetic.configurations must hold positive (M, N) pairs")
        if not self.snr_grid_db:
            raise ConfigurationError("synthetic.snr_grid_db must not be empty")
        if self.trials < 2:
            raise ConfigurationError("synthetic.trials must be at least 2")
        if not self.sigma_x_sq > 0.0:
            raise ConfigurationError("synthetic.sigma_x_sq must be positive")
        if self.smoothing < 0.0:
            raise ConfigurationError("synthetic.smoothing must be nonnegative")
        if not -1.0 < self.prior_correlation < 1.0:
            raise ConfigurationError("synthetic.prior_correlation must lie in (-1, 1)")


@dataclass(frozen=True)
class BenchSettings:
    folds: int = 5
    partitions: int = 20
    sigma_x_grid: Tuple[float, ...] = ()
    estimators: Tuple[EstimatorId, ...] = ()
    data_dir: str = "data"
    catalog: str = "config/datasets.yaml"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BenchSettings":
        settings = cls(
            folds=_number(data["folds"], int, "bench.folds"),
            partitions=_number(data["partitions"], int, "bench.partitions"),
            sigma_x_grid=tuple(
                _number(v, float, "bench.sigma_x_grid") for v in data["sigma_x_grid"]
            ),
            estimators=_parse_estimators(data["estimators"], "bench.estimators"),
            data_dir=str(data["data_dir"]),
            catalog=str(data["catalog"]),
        )
        settings.validate()
        return settings

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigurationError("bench.folds must be at least 2")
        if self.partitions < 1:
            raise ConfigurationError("bench.partitions must be at least 1")
        if not self.sigma_x_grid or min(self.sigma_x_grid) <= 0.0:
            raise ConfigurationError("bench.sigma_x_grid must hold positive values")


@dataclass(frozen=True)
class VerifySettings:
    trials: int = 10000

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VerifySettings":
        settings = cls(trials=_number(data["trials"], int, "verify.trials"))
        if settings.trials < 10:
            raise ConfigurationError("verify.trials must be at least 10")
        return settings


@dataclass(frozen=True)
class OutputSettings:
    format: str = "csv"
    path: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OutputSettings":
        settings = cls(
            format=str(data["format"]),
            path=None if data["path"] is None else str(data["path"]),
        )
        if settings.format not in FORMATS:
            raise ConfigurationError(
                f"output.format must be one of {', '.join(FORMATS)}",
                details={"format": settings.format},
            )
        return settings


@dataclass(frozen=True)
class RuntimeSettings:
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RuntimeSettings":
        settings = cls(
            seed=_number(data["seed"], int, "runtime.seed"),
            threads=_number(data["threads"], int, "runtime.threads"),
        )
        if not 0 <= settings.seed < 2**64:
            raise ConfigurationError("runtime.seed must be a 64-bit unsigned integer")
        if settings.threads < 1:
            raise ConfigurationError("runtime.threads must be at least 1")
        return settings


def _solver_from_dict(data: Mapping[str, Any]) -> SolverConfig:
    try:
        return SolverConfig(
            max_iter=_number(data["max_iter"], int, "solver.max_iter"),
            tol=_number(data["tol"], float, "solver.tol"),
            gibbs_samples=_number(data["gibbs_samples"], int, "solver.gibbs_samples"),
            gibbs_burn_in=_number(data["gibbs_burn_in"], int, "solver.gibbs_burn_in"),
            divergence_bound=_number(
                data["divergence_bound"], float, "solver.divergence_bound"
            ),
        )
    except ConfigurationError:
        raise
    except LinProbitError as e:
        raise ConfigurationError(f"solver: {e.message}")


SECTIONS = ("synthetic", "solver", "bench", "verify", "output", "runtime")


@dataclass(frozen=True)
class RunConfig:
    """All settings of one CLI invocation."""

    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    solver: SolverConfig = field(default_factory=SolverConfig.desk_scale)
    bench: BenchSettings = field(default_factory=BenchSettings)
    verify: VerifySettings = field(default_factory=VerifySettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Build from a complete nested mapping (every section and key present)."""
        missing = [s for s in SECTIONS if s not in data]
        if missing:
            raise ConfigurationError(f"Missing configuration section(s): {', '.join(missing)}")
        unknown = [s for s in data if s not in SECTIONS]
        for name in SECTIONS:
            if not isinstance(data[name], Mapping):
                raise ConfigurationError(f"Configuration section '{name}' must be a mapping")
            known = {f.name for f in fields(cls.__dataclass_fields__[name].type)}
            unknown += [f"{name}.{k}" for k in data[name] if k not in known]
        if unknown:
            raise ConfigurationError(
                f"Unknown configuration key(s): {', '.join(unknown)}",
                details={"keys": unknown},
            )
        try:
            return cls(
                synthetic=SyntheticSettings.from_dict(data["synthetic"]),
                solver=_solver_from_dict(data["solver"]),
                bench=BenchSettings.from_dict(data["bench"]),
                verify=VerifySettings.from_dict(data["verify"]),
                output=OutputSettings.from_dict(data["output"]),
                runtime=RuntimeSettings.from_dict(data["runtime"]),
            )
        except KeyError as e:
            raise ConfigurationError(f"Missing configuration key: {e.args[0]}")

    def to_dict(self) -> Dict[str, Any]:
        """Nested plain-data form; `RunConfig.from_dict(c.to_dict()) == c`."""
        return {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}

    def with_overrides(self, section: str, **values: Any) -> "RunConfig":
        """Replace the given keys of one section; None values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        known = {f.name for f in fields(current)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(
                f"Unknown configuration key(s): {', '.join(f'{section}.{k}' for k in unknown)}"
            )
        merged = self.to_dict()
        merged[section].update(_plain(values))
        return RunConfig.from_dict(merged)


def _plain(value: Any) -> Any:
    if isinstance(value, EstimatorId):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def merge_strict(
    base: Dict[str, Any], override: Mapping[str, Any], prefix: str = ""
) -> Dict[str, Any]:
    """
    Recursively overlay `override` on `base`.

    Raises:
        ConfigurationError: a key of `override` does not exist in `base`
    """
    merged = dict(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(
                f"Unknown configuration key: {dotted}", details={"key": dotted}
            )
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"{dotted} must be a mapping", details={"key": dotted})
            merged[key] = merge_strict(base[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = value
    return merged


def load_defaults(path: Union[str, Path] = DEFAULTS_PATH) -> Dict[str, Any]:
    """Load the defaults file as a nested mapping."""
    return _load_yaml(Path(path))


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Settings taken from LINPROBIT_* environment variables."""
    environ = os.environ if environ is None else environ
    overrides: Dict[str, Any] = {}
    threads = environ.get("LINPROBIT_THREADS")
    if threads:
        threads = _number(threads, int, "LINPROBIT_THREADS")
        overrides.setdefault("runtime", {})["threads"] = threads
    return overrides


def load_run_config(
    config_path: Optional[Union[str, Path]] = None,
    defaults_path: Union[str, Path] = DEFAULTS_PATH,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Defaults, then the user file, then the environment."""
    settings = load_defaults(defaults_path)
    if config_path is not None:
        settings = merge_strict(settings, _load_yaml(Path(config_path)))
        logger.info(f"Loaded configuration overrides from {config_path}")
    settings = merge_strict(settings, env_overrides(environ))
    return RunConfig.from_dict(settings)


def full_scale(solver: SolverConfig) -> SolverConfig:
    """Restore the full Gibbs chain length (50000 samples, 20000 burn-in)."""
    return replace(solver, gibbs_samples=FULL_GIBBS_SAMPLES, gibbs_burn_in=FULL_GIBBS_BURN_IN)
