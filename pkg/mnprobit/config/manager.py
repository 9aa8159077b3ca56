"""Configuration manager for mnprobit runs."""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from ..utils.errors import MnprobitConfigError
from ..utils.logging import get_logger
from .models import ConfigDefaults, RunConfig

logger = get_logger(__name__)

ENV_PREFIX = "MNPROBIT_"


class ConfigManager:
    """Builds a RunConfig from defaults, environment, a config file and CLI overrides."""

    def __init__(self, config_file: Optional[Path] = None):
        self.config_file = config_file
        self.config: Optional[RunConfig] = None
        self._config_sources: List[str] = []

    def load_config(
        self,
        config_file: Optional[Path] = None,
        cli_overrides: Optional[Dict[str, Any]] = None,
    ) -> RunConfig:
        """Load configuration from multiple sources.

        Sources (in order of precedence):
        1. CLI overrides
        2. Configuration file (YAML or JSON)
        3. Environment variables (``MNPROBIT_<KEY>``)
        4. Default values

        Raises:
            MnprobitConfigError: If the file cannot be read or validation fails
        """
        self._config_sources = ["defaults"]
        config_dict = ConfigDefaults.get_default_config()

        env_config = self._load_from_environment()
        if env_config:
            config_dict.update(env_config)
            self._config_sources.append("environment")

        path = config_file or self.config_file
        file_config = self._load_from_file(path)
        if file_config:
            config_dict.update(file_config)
            self._config_sources.append(f"file:{path}")

        if cli_overrides:
            config_dict.update({k: v for k, v in cli_overrides.items() if v is not None})
            self._config_sources.append("cli")

        try:
            self.config = RunConfig(**config_dict)
        except ValidationError as e:
            problems = self._format_errors(e)
            logger.error(f"Configuration validation failed: {'; '.join(problems)}")
            raise MnprobitConfigError(
                f"Invalid configuration: {'; '.join(problems)}",
                context={"module": "data_io", "sources": ", ".join(self._config_sources)},
                cause=e,
            ) from e

        logger.debug(f"Configuration loaded from sources: {', '.join(self._config_sources)}")
        return self.config

    def _load_from_file(self, config_file: Optional[Path]) -> Optional[Dict[str, Any]]:
        if config_file is None:
            return None
        if not config_file.exists():
            raise MnprobitConfigError(
                f"Configuration file not found: {config_file}", context={"module": "data_io"}
            )
        content = config_file.read_text(encoding="utf-8")
        try:
            if config_file.suffix.lower() == ".json":
                config_dict = json.loads(content)
            else:
                config_dict = yaml.safe_load(content)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise MnprobitConfigError(
                f"Cannot parse configuration file {config_file}: {e}",
                context={"module": "data_io"},
                cause=e,
            ) from e
        if config_dict is None:
            return {}
        if not isinstance(config_dict, dict):
            raise MnprobitConfigError(
                f"Configuration file {config_file} must hold a flat key-value mapping",
                context={"module": "data_io"},
            )
        logger.debug(f"Loaded configuration from file: {len(config_dict)} keys")
        return config_dict

    def _load_from_environment(self) -> Dict[str, Any]:
        """Read ``MNPROBIT_NU2=4`` style variables into ``{"nu2": 4.0}``."""
        config_dict: Dict[str, Any] = {}
        for key, value in os.environ.items():
            if not key.startswith(ENV_PREFIX):
                continue
            config_dict[key[len(ENV_PREFIX) :].lower()] = self._parse_env_value(value)
        if config_dict:
            logger.debug(f"Loaded configuration from environment: {len(config_dict)} keys")
        return config_dict

    def _parse_env_value(self, value: str) -> Any:
        if value.lower() in ("true", "false"):
            return value.lower() == "true"
        if value.lstrip("-").isdigit():
            return int(value)
        try:
            return float(value)
        except ValueError:
            pass
        if value.startswith(("[", "{")):
            try:
                return json.loads(value)
            except json.JSONDecodeError:
                pass
        return value

    @staticmethod
    def _format_errors(error: ValidationError) -> List[str]:
        problems = []
        for item in error.errors():
            field = ".".join(str(x) for x in item["loc"]) or "config"
            problems.append(f"{field}: {item['msg']}")
        return problems

    def save_config(self, config_file: Path) -> None:
        """Write the effective configuration as YAML."""
        if not self.config:
            raise MnprobitConfigError("No configuration loaded to save")
        config_file.parent.mkdir(parents=True, exist_ok=True)
        with open(config_file, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.config.echo(), f, default_flow_style=False, sort_keys=True)
        logger.debug(f"Configuration saved to {config_file}")

    def get_config_summary(self) -> Dict[str, Any]:
        """Configuration summary for display."""
        if not self.config:
            return {"status": "No configuration loaded"}
        config = self.config
        return {
            "sources": ", ".join(self._config_sources),
            "data": str(config.data_path),
            "method": config.method,
            "nu2": config.nu2,
            "sigma": config.sigma_source,
            "seed": config.seed,
            "output_dir": str(config.output_dir),
        }
