"""
QSMC - Configuration Manager

Handles loading configuration settings from multiple sources:
1. Default settings (hardcoded)
2. Experiment file (INI, given with --config)
3. Environment variables (with prefix QSMC_)
4. Command line overrides of the form --section.option=value (highest priority)

The resolved settings are turned into an ExperimentConfig: model spec, data
source, RunConfig and output directory. The [Diagnostics] settings are echoed
into the run summary, where diagnose picks them up.
"""

import configparser
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from errors import ConfigError
from models import FAMILIES, ModelSpec
from smc_engine import RunConfig

logger = logging.getLogger('qsmc.config_manager')


class ConfigManager:
    """Manages experiment configuration with multiple source support"""

    # Configuration key prefixes
    ENV_PREFIX = "QSMC_"

    # Configuration sections
    SECTION_MODEL = "Model"
    SECTION_RUN = "Run"
    SECTION_OUTPUT = "Output"
    SECTION_DIAGNOSTICS = "Diagnostics"

    # Default configuration values
    DEFAULT_CONFIG = {
        SECTION_MODEL: {
            "family": "gaussian-target",
            "dim": "1",
            "data": "",  # Empty means synthetic data (or none for gaussian-target)
            "schema": "",  # Empty means the family's own schema; 'menarche' for grouped data
            "synthetic_n": "1000",
            "true_params": "",
            "data_seed": "1",
            "prior_scale": "10.0",
            "noise_scale": "1.0",
            "target_mean": "0.0",
            "target_var": "1.0",
            "x_hat": "",  # Empty means mode search
            "preconditioner": "default",  # default, identity
            "support_lo": "",
            "support_hi": "",
        },
        SECTION_RUN: {
            "engine": "qsmc",  # qsmc, scale, r-qsmc, r-scale
            "estimator": "",  # Empty means the engine's own estimator
            "n_particles": "1024",
            "horizon": "50.0",
            "checkpoint_gap": "0.1",
            "ess_threshold": "",  # Empty means n_particles / 2
            "burn_in": "10.0",
            "seed": "0",
            "batch_size": "1",
            "resampler": "systematic",  # multinomial, systematic
            "theta_scale": "1.0",
            "threads": "1",
            "kbm_use_lower": "False",
            "support_width": "10.0",
        },
        SECTION_OUTPUT: {
            "directory": "qsmc_output",
            "float_format": "%.17g",
        },
        SECTION_DIAGNOSTICS: {
            "reference": "",  # norm:MEAN,SD or a run directory
            "histogram_bins": "50",
        },
    }

    def __init__(self, config_path: Optional[str] = None, overrides: Sequence[str] = ()):
        """Initialize the configuration manager"""
        self.config_path = config_path

        # Initialize configuration parser
        self.config = configparser.ConfigParser(interpolation=None)

        # Initialize with default values
        for section, options in self.DEFAULT_CONFIG.items():
            self.config[section] = dict(options)

        self.load_config()
        self.apply_environment_variables()
        self.apply_overrides(overrides)

    def load_config(self) -> None:
        """Load configuration from the experiment file"""
        if not self.config_path:
            return
        if not os.path.isfile(self.config_path):
            raise ConfigError(f"configuration file not found: {self.config_path}")
        try:
            self.config.read(self.config_path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {self.config_path}: {e}") from e
        unknown = [s for s in self.config.sections() if s not in self.DEFAULT_CONFIG]
        if unknown:
            raise ConfigError(f"{self.config_path}: unknown sections {unknown}")
        for section in self.DEFAULT_CONFIG:
            extra = [o for o in self.config[section] if o not in self.DEFAULT_CONFIG[section]]
            if extra:
                raise ConfigError(f"{self.config_path}: unknown options {extra} in [{section}]")
        logger.info("Loaded configuration from %s", self.config_path)

    def save_config(self, path: str) -> None:
        """Save current configuration to an INI file"""
        with open(path, 'w') as config_file:
            self.config.write(config_file)
        logger.info("Saved configuration to %s", path)

    def apply_environment_variables(self) -> None:
        """Apply relevant environment variables to configuration"""
        for env_var, value in os.environ.items():
            if not env_var.startswith(self.ENV_PREFIX):
                continue
            # QSMC_RUN_N_PARTICLES -> section Run, option n_particles
            parts = env_var[len(self.ENV_PREFIX):].split('_', 1)
            if len(parts) != 2:
                continue
            section, option = parts[0].title(), parts[1].lower()
            if section in self.config and option in self.config[section]:
                self.config[section][option] = value
                logger.info("Applied environment variable %s=%s", env_var, value)

    def apply_overrides(self, overrides: Sequence[str]) -> None:
        """Apply --section.option=value overrides"""
        for arg in overrides:
            if not (arg.startswith('--') and '=' in arg and '.' in arg.split('=', 1)[0]):
                raise ConfigError(f"override must look like --section.option=value, got '{arg}'")
            setting, value = arg[2:].split('=', 1)
            section, option = setting.split('.', 1)
            section = section.title()
            if section not in self.config or option not in self.config[section]:
                raise ConfigError(f"unknown setting '{setting}'")
            self.config[section][option] = value
            logger.info("Applied override --%s=%s", setting, value)

    def get(self, section: str, option: str, fallback: Any = None) -> Any:
        """Get a configuration value with fallback"""
        try:
            return self.config[section][option]
        except KeyError:
            return fallback

    def _typed(self, getter, section: str, option: str, fallback):
        try:
            return getter(section, option)
        except (KeyError, configparser.NoSectionError, configparser.NoOptionError):
            return fallback
        except ValueError as e:
            raise ConfigError(f"[{section}] {option}: {e}") from e

    def get_boolean(self, section: str, option: str, fallback: bool = False) -> bool:
        """Get a boolean configuration value"""
        return self._typed(self.config.getboolean, section, option, fallback)

    def get_int(self, section: str, option: str, fallback: int = 0) -> int:
        """Get an integer configuration value"""
        return self._typed(self.config.getint, section, option, fallback)

    def get_float(self, section: str, option: str, fallback: float = 0.0) -> float:
        """Get a float configuration value"""
        return self._typed(self.config.getfloat, section, option, fallback)

    def get_optional_float(self, section: str, option: str) -> Optional[float]:
        """Float value, or None when the option is empty"""
        if not self.get(section, option, "").strip():
            return None
        return self.get_float(section, option)

    def get_floats(self, section: str, option: str) -> Optional[List[float]]:
        """Comma-separated floats, or None when the option is empty"""
        text = self.get(section, option, "").strip()
        if not text:
            return None
        try:
            return [float(part) for part in text.split(',')]
        except ValueError as e:
            raise ConfigError(f"[{section}] {option}: expected comma-separated numbers, got '{text}'") from e

    def set(self, section: str, option: str, value: Any) -> None:
        """Set a configuration value"""
        if section not in self.config:
            self.config[section] = {}
        self.config[section][option] = str(value)

    def as_dict(self) -> Dict[str, Dict[str, str]]:
        return {section: dict(self.config[section]) for section in self.config.sections()}

    def __str__(self) -> str:
        """String representation of the configuration"""
        result = []
        for section in self.config.sections():
            result.append(f"[{section}]")
            for option in self.config[section]:
                result.append(f"{option} = {self.config[section][option]}")
            result.append("")
        return "\n".join(result)


@dataclass
class ExperimentConfig:
    """Everything a run needs, resolved and validated before it starts"""

    model_spec: ModelSpec
    data_path: Optional[str]
    schema: str
    synthetic_n: int
    true_params: Optional[List[float]]
    data_seed: int
    x_hat: Optional[List[float]]
    preconditioner: str
    run: RunConfig
    output_dir: str
    float_format: str
    echo: Dict[str, Dict[str, str]] = field(default_factory=dict)


def _model_spec(config: ConfigManager) -> ModelSpec:
    section = ConfigManager.SECTION_MODEL
    family = config.get(section, "family")
    if family not in FAMILIES:
        raise ConfigError(f"unknown model family '{family}', expected one of {FAMILIES}")
    options: Dict[str, Any] = {"noise_scale": config.get_float(section, "noise_scale", 1.0)}
    dim = config.get_int(section, "dim", 1)
    if family == "gaussian-target":
        mean = config.get_floats(section, "target_mean") or [0.0]
        var = config.get_floats(section, "target_var") or [1.0]
        if len(mean) not in (1, dim) or len(var) not in (1, dim):
            raise ConfigError(f"target_mean and target_var need 1 or {dim} entries")
        options["target_mean"] = mean if len(mean) == dim else mean * dim
        options["target_var"] = var if len(var) == dim else var * dim
    support_lo = config.get_floats(section, "support_lo")
    support_hi = config.get_floats(section, "support_hi")
    if (support_lo is None) != (support_hi is None):
        raise ConfigError("support_lo and support_hi must be given together")
    if support_lo is not None:
        options["support_lo"], options["support_hi"] = support_lo, support_hi
    try:
        return ModelSpec.for_family(family, dim=dim, prior_scale=config.get_float(section, "prior_scale", 10.0),
                                    **options)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def build_experiment(config: ConfigManager, base_dir: Optional[str] = None) -> ExperimentConfig:
    """
    Resolve an ExperimentConfig; referenced paths must exist.

    Relative data paths are resolved against base_dir (the config file's directory).
    """
    model = ConfigManager.SECTION_MODEL
    run = ConfigManager.SECTION_RUN
    spec = _model_spec(config)

    data_path = config.get(model, "data", "").strip() or None
    if data_path is not None:
        if base_dir and not os.path.isabs(data_path):
            data_path = os.path.join(base_dir, data_path)
        if not os.path.isfile(data_path):
            raise ConfigError(f"data file not found: {data_path}")
    synthetic_n = config.get_int(model, "synthetic_n", 1000)
    true_params = config.get_floats(model, "true_params")
    if data_path is None and spec.family != "gaussian-target":
        if synthetic_n < 1:
            raise ConfigError("synthetic_n must be positive when no data file is given")
        if true_params is None:
            raise ConfigError(f"{spec.family} without a data file needs true_params for synthetic data")

    x_hat = config.get_floats(model, "x_hat")
    if x_hat is not None and len(x_hat) != spec.dim:
        raise ConfigError(f"x_hat has {len(x_hat)} entries, model dimension is {spec.dim}")
    preconditioner = config.get(model, "preconditioner", "default")
    if preconditioner not in ("default", "identity"):
        raise ConfigError(f"preconditioner must be 'default' or 'identity', got '{preconditioner}'")

    run_config = RunConfig(
        n_particles=config.get_int(run, "n_particles", 1024),
        horizon=config.get_float(run, "horizon", 50.0),
        checkpoint_gap=config.get_float(run, "checkpoint_gap", 0.1),
        ess_threshold=config.get_optional_float(run, "ess_threshold"),
        burn_in=config.get_float(run, "burn_in", 10.0),
        seed=config.get_int(run, "seed", 0),
        estimator=config.get(run, "estimator", "").strip() or None,
        batch_size=config.get_int(run, "batch_size", 1),
        resampler=config.get(run, "resampler", "systematic"),
        engine=config.get(run, "engine", "qsmc"),
        theta_scale=config.get_float(run, "theta_scale", 1.0),
        threads=config.get_int(run, "threads", 1),
        kbm_use_lower=config.get_boolean(run, "kbm_use_lower", False),
        support_width=config.get_float(run, "support_width", 10.0),
    )
    if spec.family == "gaussian-target" and run_config.estimator != "exact":
        raise ConfigError(f"estimator '{run_config.estimator}' subsamples data factors; gaussian-target has none")

    return ExperimentConfig(
        model_spec=spec,
        data_path=data_path,
        schema=config.get(model, "schema", "").strip() or spec.family,
        synthetic_n=synthetic_n,
        true_params=true_params,
        data_seed=config.get_int(model, "data_seed", 1),
        x_hat=x_hat,
        preconditioner=preconditioner,
        run=run_config,
        output_dir=config.get(ConfigManager.SECTION_OUTPUT, "directory", "qsmc_output"),
        float_format=config.get(ConfigManager.SECTION_OUTPUT, "float_format", "%.17g"),
        echo=config.as_dict(),
    )
