#!/usr/bin/env python3
"""
Settings Manager for ScaRR

Toolchain settings live in one JSON file. File values are laid over the
built-in defaults key by key, so a file may set a single nested value such
as bench.runs. The shared attestation key never touches the file; it is
read from the environment.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .errors import ConfigError

logger = logging.getLogger(__name__)

KEY_ENV_VAR = "SCARR_KEY_HEX"
DEFAULT_PORT = 7411
DEFAULT_CONFIG = Path.home() / ".scarr" / "config.json"

DEFAULTS: Dict[str, Any] = {
    "hash_algorithm": "blake2b-256",
    "batch_limit": 50000,
    "codec": "none",
    "bind_host": "127.0.0.1",
    "port": DEFAULT_PORT,
    "max_workers": 4,
    "socket_timeout": 30.0,
    "challenge_input_hex": "",
    "log_level": "INFO",
    "log_file": None,
    "walk_max_steps": 100000,
    "bench": {"runs": 10, "seed": 0},
}


def _overlay(base: Dict[str, Any], layer: Mapping[str, Any]) -> Dict[str, Any]:
    for name, value in layer.items():
        if isinstance(value, Mapping) and isinstance(base.get(name), dict):
            _overlay(base[name], value)
        else:
            base[name] = value
    return base


class SettingsManager:
    """Defaults plus the optional settings file, addressed with dotted keys."""

    def __init__(self, config_file: Optional[str] = None):
        """
        Args:
            config_file: Settings file; ~/.scarr/config.json when None
        """
        self.config_file = Path(config_file) if config_file else DEFAULT_CONFIG
        self.settings = json.loads(json.dumps(DEFAULTS))
        self.load_settings()

    def load_settings(self) -> None:
        """Overlay the settings file, if there is one. A broken file is ignored."""
        if not self.config_file.is_file():
            logger.debug("No settings file at %s", self.config_file)
            return
        try:
            layer = json.loads(self.config_file.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            logger.warning("Ignoring unreadable settings file %s: %s", self.config_file, e)
            return
        if not isinstance(layer, dict):
            logger.warning("Ignoring settings file %s: top level is not an object", self.config_file)
            return
        _overlay(self.settings, layer)

    def save_settings(self) -> None:
        """Write every current value back to the settings file."""
        try:
            self.config_file.parent.mkdir(parents=True, exist_ok=True)
            self.config_file.write_text(json.dumps(self.settings, indent=4), encoding="utf-8")
        except OSError as e:
            logger.error("Could not write settings to %s: %s", self.config_file, e)

    def get(self, key: str, default: Any = None) -> Any:
        """Value at a dotted key such as "bench.runs", or default."""
        node: Any = self.settings
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value: Any) -> None:
        """Store value at a dotted key, creating intermediate sections."""
        *sections, leaf = key.split(".")
        node = self.settings
        for part in sections:
            node = node.setdefault(part, {})
        node[leaf] = value

    def get_hash_algorithm(self) -> str:
        return self.get("hash_algorithm", DEFAULTS["hash_algorithm"])

    def get_batch_limit(self) -> int:
        """Online measurements per partial report."""
        limit = int(self.get("batch_limit", DEFAULTS["batch_limit"]))
        if limit < 1:
            raise ConfigError(f"batch_limit must be >= 1, got {limit}")
        return limit

    def get_bind_address(self) -> Tuple[str, int]:
        return self.get("bind_host", DEFAULTS["bind_host"]), int(self.get("port", DEFAULT_PORT))

    def get_challenge_input(self) -> bytes:
        """Opaque input sent along with every challenge nonce."""
        try:
            return bytes.fromhex(self.get("challenge_input_hex") or "")
        except ValueError as e:
            raise ConfigError(f"challenge_input_hex is not valid hex: {e}") from e

    def get_shared_key(self) -> bytes:
        """Prover/verifier shared secret.

        Returns:
            Key bytes decoded from the SCARR_KEY_HEX environment variable

        Raises:
            ConfigError: The variable is unset, empty or not hex
        """
        key_hex = os.environ.get(KEY_ENV_VAR, "").strip()
        if not key_hex:
            raise ConfigError(f"{KEY_ENV_VAR} is not set")
        try:
            key = bytes.fromhex(key_hex)
        except ValueError as e:
            raise ConfigError(f"{KEY_ENV_VAR} is not valid hex: {e}") from e
        return key
