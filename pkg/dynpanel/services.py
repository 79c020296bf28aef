"""Experiment and estimator registries and the configuration factory."""

import logging
from pathlib import Path
from typing import Callable, Optional, Union

from conflator import Conflator
from pydantic import ValidationError

from dynpanel.configs import ExperimentConfig
from dynpanel.estimators import EstimateResult, anderson_hsiao, pooled_ols, within_estimator
from dynpanel.exceptions import InvalidConfig, UsageError
from dynpanel.gmm import gmm_estimate
from dynpanel.panel import ModelSpec, PanelDataset

logger = logging.getLogger(__name__)


class ExperimentRegistry:
    """Registry mapping built-in experiment names to their YAML presets."""

    @classmethod
    def _get_configs_dir(cls) -> Path:
        """Get the path to the configs directory."""
        return Path(__file__).parent / "configs"

    @classmethod
    def list_experiments(cls) -> list[str]:
        """
        List all available experiment names.

        Returns:
            Sorted experiment names (based on available YAML files).
        """
        configs_dir = cls._get_configs_dir()
        if not configs_dir.exists():
            return []
        return sorted(f.stem for f in configs_dir.glob("*.yaml"))

    @classmethod
    def experiment_config_exists(cls, name: str) -> bool:
        return (cls._get_configs_dir() / f"{name}.yaml").exists()

    @classmethod
    def get_experiment_config_path(cls, name: str) -> Path:
        """
        Get the path to a built-in experiment preset.

        Raises:
            UsageError: If no preset of that name exists.
        """
        if not cls.experiment_config_exists(name):
            available = ", ".join(cls.list_experiments())
            raise UsageError(f"Unknown experiment: {name}. Available: {available}")
        return cls._get_configs_dir() / f"{name}.yaml"


def format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{path}: {item['msg']}")
    return "; ".join(parts)


class ConfigurationFactory:
    """Factory for loading experiment configurations using Conflator."""

    @staticmethod
    def load_config(
        name: Optional[str] = None, config_path: Optional[Union[str, Path]] = None
    ) -> ExperimentConfig:
        """
        Load an experiment configuration.

        Loads a built-in preset or an explicit YAML/JSON file as the base config,
        then applies ``DYNPANEL_*`` environment overrides handled by Conflator.

        Args:
            name: Built-in experiment name (ignored when ``config_path`` is given).
            config_path: Path to a custom experiment document.

        Raises:
            UsageError: If neither argument is given or the preset is unknown.
            InvalidConfig: If the file is missing or violates the schema; the
                message names the offending key path.
        """
        if config_path is not None:
            resolved = Path(config_path).expanduser().resolve()
            if not resolved.exists():
                raise InvalidConfig(f"Config file does not exist: {resolved}")
        elif name is not None:
            resolved = ExperimentRegistry.get_experiment_config_path(name)
        else:
            raise UsageError("Either an experiment name or a config path is required")

        try:
            config = Conflator("dynpanel", ExperimentConfig, config_file=resolved).load()
        except ValidationError as e:
            raise InvalidConfig(f"Invalid config {resolved.name}: {format_validation_error(e)}") from e
        logger.debug(f"Loaded experiment config from {resolved}")
        return config


Fitter = Callable[..., EstimateResult]


class EstimatorRegistry:
    """Registry mapping method names to estimators."""

    _methods: dict[str, Fitter] = {
        "ols": lambda dataset, spec, **_: pooled_ols(dataset, spec),
        "within": lambda dataset, spec, **_: within_estimator(dataset, spec),
        "ah-diff": lambda dataset, spec, **_: anderson_hsiao(dataset, spec, "difference_instrument"),
        "ah-level": lambda dataset, spec, **_: anderson_hsiao(dataset, spec, "level_instrument"),
        "ab1": lambda dataset, spec, **options: gmm_estimate(dataset, spec, steps="one", **options),
        "ab2": lambda dataset, spec, **options: gmm_estimate(dataset, spec, steps="two", **options),
    }

    @classmethod
    def list_methods(cls) -> list[str]:
        return list(cls._methods)

    @classmethod
    def fit(cls, method: str, dataset: PanelDataset, spec: ModelSpec, **gmm_options) -> EstimateResult:
        """
        Run ``method`` on ``dataset``.

        GMM options (``transform``, ``x_policy``, ``max_lag_depth``) are passed to
        the Arellano-Bond methods and ignored by the others.

        Raises:
            UsageError: If the method is unknown.
        """
        if method not in cls._methods:
            raise UsageError(f"Unknown method '{method}'. Available: {', '.join(cls._methods)}")
        options = {key: value for key, value in gmm_options.items() if value is not None}
        return cls._methods[method](dataset, spec, **options)
