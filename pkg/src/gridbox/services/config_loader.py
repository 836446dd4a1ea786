"""Configuration loader for gridbox."""

from pathlib import Path
from typing import Any, Dict, Optional, Set

import yaml

from gridbox.errors import GridError


class ConfigLoader:
    """Loads YAML client configuration and topology files."""

    CLIENT_KEYS = {
        "node",
        "user",
        "keyring",
        "host_id",
        "output",
        "password",
        "topology",
        "verbose",
        "log_file",
        "token_file",
        "stable_output",
    }

    TOPOLOGY_KEYS = {
        "mode",
        "seed",
        "central_vo",
        "central_node",
        "nodes",
        "vos",
        "trust",
        "supervo",
        "foreign_grids",
        "config",
        "links",
    }

    def load(self, config_path: Optional[str]) -> Dict[str, Any]:
        return self._load(config_path, self.CLIENT_KEYS, required=False)

    def load_topology(self, config_path: str) -> Dict[str, Any]:
        parsed = self._load(config_path, self.TOPOLOGY_KEYS, required=True)
        if not parsed.get("nodes"):
            raise GridError("BadConfig", f"Topology file '{config_path}' lists no nodes.")
        return parsed

    def _load(
        self, config_path: Optional[str], supported: Set[str], required: bool
    ) -> Dict[str, Any]:
        if not config_path:
            if required:
                raise GridError("BadConfig", "No configuration file given.")
            return {}

        path = Path(config_path)
        if not path.exists():
            raise GridError("BadConfig", f"Config file not found: {config_path}")

        try:
            parsed = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (yaml.YAMLError, OSError) as exc:
            raise GridError("BadConfig", f"Invalid config file '{config_path}': {exc}") from exc

        if parsed is None:
            return {}
        if not isinstance(parsed, dict):
            raise GridError("BadConfig", "Config file must contain a YAML mapping at the root.")

        unknown = sorted(set(parsed.keys()) - supported)
        if unknown:
            unknown_list = ", ".join(unknown)
            raise GridError("BadConfig", f"Unknown configuration keys: {unknown_list}")

        return parsed
