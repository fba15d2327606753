"""
Configuration Manager for Fracture Width Filter
Handles loading, merging, validating and echoing experiment settings.

Config files are flat key-value text:

    # comment
    filter.particles = 80
    filter.exploration = [400.0]
    solver.ordering = "colamd"

Values are JSON literals; anything that does not parse as JSON is taken
as a bare string.
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .constants import DEFAULT_CONFIG as CONST_DEFAULT_CONFIG
from .constants import PRESETS as CONST_PRESETS
from .exceptions import ConfigError

logger = logging.getLogger(__name__)


def flatten_config(config: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """
    Flatten a nested config into dotted keys. Lists are leaves.

    Args:
        config: Nested configuration dictionary.
        prefix: Key prefix for recursion.

    Returns:
        Dictionary mapping dotted keys to leaf values.
    """
    flat: Dict[str, Any] = {}
    for key, value in config.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def unflatten_config(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Rebuild a nested dictionary from dotted keys."""
    nested: Dict[str, Any] = {}
    for dotted, value in flat.items():
        parts = dotted.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Key '{dotted}' conflicts with a leaf value")
        node[parts[-1]] = value
    return nested


def parse_config_text(text: str, source: str = "<text>") -> Dict[str, Any]:
    """
    Parse flat key-value config text.

    Args:
        text: File contents.
        source: Name used in error messages.

    Returns:
        Dictionary of dotted keys to parsed values.
    """
    flat: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, value_text = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in flat:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        flat[key] = _parse_value(value_text)
    return flat


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        # trailing comments on value lines
        if "#" in text:
            head = text.split("#", 1)[0].strip()
            if head != text:
                return _parse_value(head)
        return text


def format_config(config: Dict[str, Any]) -> str:
    """Render a nested config as flat key-value text, one leaf per line."""
    lines = ["# effective configuration"]
    current_section = None
    for key, value in flatten_config(config).items():
        section = key.split(".", 1)[0]
        if section != current_section and "." in key:
            lines.append("")
            lines.append(f"# ========== {section} ==========")
            current_section = section
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


class ConfigManager:
    """Manages experiment configuration."""

    DEFAULT_CONFIG = CONST_DEFAULT_CONFIG
    PRESETS = CONST_PRESETS

    def __init__(self, config_path: Optional[Path] = None):
        """
        Initialize the configuration manager.

        Args:
            config_path: Path to a key-value config file. If None, only
                defaults, presets and overrides are used.
        """
        self.config_path = Path(config_path) if config_path is not None else None

    def config_exists(self) -> bool:
        """Check if the configuration file exists."""
        return self.config_path is not None and self.config_path.exists()

    def load_config(
        self,
        preset: Optional[str] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        """
        Load configuration: defaults, then preset, then file, then overrides.

        Args:
            preset: Preset name. When None the file's ``case`` key picks
                the preset if it names one.
            overrides: Dotted keys applied last (command-line flags).

        Returns:
            Merged configuration dictionary.

        Raises:
            ConfigError: Unreadable file, unknown keys or unknown preset.
        """
        file_flat: Dict[str, Any] = {}
        if self.config_path is not None:
            if not self.config_exists():
                raise ConfigError(f"Config file not found: {self.config_path}")
            try:
                text = self.config_path.read_text()
            except OSError as e:
                raise ConfigError(f"Error reading config {self.config_path}: {e}") from e
            file_flat = parse_config_text(text, str(self.config_path))

        if preset is None and isinstance(file_flat.get("case"), str):
            if file_flat["case"] in self.PRESETS:
                preset = file_flat["case"]

        merged = copy.deepcopy(self.DEFAULT_CONFIG)
        if preset is not None:
            if preset not in self.PRESETS:
                raise ConfigError(
                    f"Unknown preset '{preset}'; choose from {sorted(self.PRESETS)}"
                )
            merged = self._merge_configs(merged, self.PRESETS[preset])
            logger.info(f"Applied preset {preset}")

        for layer, label in ((file_flat, "config file"), (overrides or {}, "overrides")):
            if not layer:
                continue
            self._check_keys(layer, label)
            merged = self._merge_configs(merged, unflatten_config(layer))

        return merged

    def save_config(self, config: Dict[str, Any], path: Optional[Path] = None) -> Path:
        """
        Write the config echo in the same flat format it is read from.

        Args:
            config: Configuration dictionary.
            path: Target file; defaults to the manager's config path.

        Returns:
            Path written.
        """
        target = Path(path) if path is not None else self.config_path
        if target is None:
            raise ConfigError("No path given for the config echo")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(format_config(config))
        logger.debug(f"Wrote config echo to {target}")
        return target

    def _merge_configs(self, default: Dict[str, Any], user: Dict[str, Any]) -> Dict[str, Any]:
        """
        Merge user config with default config, preserving structure.

        Args:
            default: Default configuration dictionary.
            user: User configuration dictionary.

        Returns:
            Merged configuration dictionary.
        """
        result = copy.deepcopy(default)

        for key, value in user.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._merge_configs(result[key], value)
            else:
                result[key] = copy.deepcopy(value)

        return result

    def _check_keys(self, flat: Dict[str, Any], label: str) -> None:
        """Reject keys that do not exist in DEFAULT_CONFIG."""
        known = flatten_config(self.DEFAULT_CONFIG)
        sections = self._section_names(known)
        unknown: List[str] = []
        for key in flat:
            if key in known:
                continue
            if key in sections:
                raise ConfigError(f"'{key}' in {label} is a section, set its keys instead")
            unknown.append(key)
        if unknown:
            raise ConfigError(f"Unknown config keys in {label}: {', '.join(sorted(unknown))}")

    @staticmethod
    def _section_names(known: Dict[str, Any]) -> Tuple[str, ...]:
        names = set()
        for key in known:
            parts = key.split(".")
            for i in range(1, len(parts)):
                names.add(".".join(parts[:i]))
        return tuple(sorted(names))
