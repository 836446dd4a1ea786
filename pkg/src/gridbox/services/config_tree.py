"""Hierarchical configuration keyed ``/<vo>/<site>/<host>/<key>``.

Lookups fall back host -> site -> vo and are cached; hit and miss counters
only ever grow.
"""

import threading
from typing import Any, Dict, Mapping, Optional, Tuple

from gridbox.errors import GridError

CacheKey = Tuple[str, str, str, str]


class ConfigTree:
    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self._values: Dict[str, str] = {}
        self._cache: Dict[CacheKey, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        for path, value in (values or {}).items():
            self._values[self._normalize(path)] = str(value)

    @staticmethod
    def _normalize(path: str) -> str:
        segments = [segment for segment in str(path).split("/") if segment]
        if len(segments) < 2 or len(segments) > 4:
            raise GridError(
                "BadConfig", f"config path {path!r} must be /<vo>[/<site>[/<host>]]/<key>"
            )
        return "/" + "/".join(segments)

    def publish(self, path: str, value: Any):
        path = self._normalize(path)
        key = path.rsplit("/", 1)[1]
        with self._lock:
            self._values[path] = str(value)
            self._cache = {k: v for k, v in self._cache.items() if k[3] != key}

    def get(self, vo: str, site: Optional[str], host: Optional[str], key: str) -> str:
        cache_key = (vo, site or "", host or "", key)
        with self._lock:
            if cache_key in self._cache:
                self.hits += 1
                return self._cache[cache_key]
            candidates = []
            if site and host:
                candidates.append(f"/{vo}/{site}/{host}/{key}")
            if site:
                candidates.append(f"/{vo}/{site}/{key}")
            candidates.append(f"/{vo}/{key}")
            for candidate in candidates:
                if candidate in self._values:
                    self.misses += 1
                    self._cache[cache_key] = self._values[candidate]
                    return self._values[candidate]
        raise GridError("KeyMissing", f"no value for {key} under /{vo}")

    def get_int(
        self, vo: str, site: Optional[str], host: Optional[str], key: str, default: int
    ) -> int:
        try:
            return int(self.get(vo, site, host, key))
        except GridError:
            return default
        except ValueError as exc:
            raise GridError("BadConfig", f"{key} must be an integer") from exc

    def get_float(
        self, vo: str, site: Optional[str], host: Optional[str], key: str, default: float
    ) -> float:
        try:
            return float(self.get(vo, site, host, key))
        except GridError:
            return default
        except ValueError as exc:
            raise GridError("BadConfig", f"{key} must be a number") from exc

    def stats(self) -> Dict[str, int]:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses}

    def items(self) -> Dict[str, str]:
        with self._lock:
            return dict(self._values)
