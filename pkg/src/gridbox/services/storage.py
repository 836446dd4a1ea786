"""Storage element: local objects plus a bounded LRU cache for remote fetches."""

import hashlib
import json
import os
import tempfile
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

from gridbox.constants import DEFAULT_SE_CACHE_BYTES
from gridbox.errors import GridError

CACHE_PROVENANCE = "cache"
_META_SUFFIX = ".meta"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class StoredObject:
    object_key: str
    size: int
    checksum: str
    owner_vo: str
    provenance: str = "ingest"


class StorageElement:
    def __init__(
        self,
        se_id: str,
        logger,
        root: Optional[str] = None,
        cache_bytes: int = DEFAULT_SE_CACHE_BYTES,
    ):
        self.se_id = se_id
        self.logger = logger
        self.cache_bytes = cache_bytes
        self.root = os.path.join(root, se_id.replace(":", "_")) if root else None
        self._objects: Dict[str, StoredObject] = {}
        self._data: Dict[str, bytes] = {}
        self._cache: "OrderedDict[str, bytes]" = OrderedDict()
        self._cache_meta: Dict[str, StoredObject] = {}
        self._cache_used = 0
        self._lock = threading.RLock()
        if self.root:
            os.makedirs(self.root, exist_ok=True)
            self._load()

    # local objects

    def put(
        self, object_key: str, data: bytes, owner_vo: str, provenance: str = "ingest"
    ) -> str:
        checksum = sha256_hex(data)
        with self._lock:
            if object_key in self._objects:
                raise GridError("AlreadyExists", f"{self.se_id} already holds {object_key}")
            meta = StoredObject(object_key, len(data), checksum, owner_vo, provenance)
            if self.root:
                self._write(object_key, data, meta)
            else:
                self._data[object_key] = bytes(data)
            self._objects[object_key] = meta
            self._drop_cached(object_key)
        self.logger.debug("%s stored %s (%s bytes)", self.se_id, object_key, len(data))
        return checksum

    def get(self, object_key: str) -> bytes:
        with self._lock:
            meta = self._objects.get(object_key)
            if meta is not None:
                data = self._read(object_key)
                if sha256_hex(data) != meta.checksum:
                    raise GridError(
                        "ChecksumMismatch", f"{self.se_id}/{object_key} is corrupted at rest"
                    )
                return data
            cached = self._cache.get(object_key)
            if cached is not None:
                self._cache.move_to_end(object_key)
                return cached
        raise GridError("NotFound", f"{self.se_id} holds no object {object_key}")

    def has(self, object_key: str) -> bool:
        with self._lock:
            return object_key in self._objects or object_key in self._cache

    def holds(self, object_key: str) -> bool:
        """Persistent objects only; cached copies do not count as replicas."""
        with self._lock:
            return object_key in self._objects

    def stat(self, object_key: str) -> StoredObject:
        with self._lock:
            meta = self._objects.get(object_key) or self._cache_meta.get(object_key)
        if meta is None:
            raise GridError("NotFound", f"{self.se_id} holds no object {object_key}")
        return meta

    def delete(self, object_key: str):
        with self._lock:
            if self._objects.pop(object_key, None) is None:
                self._drop_cached(object_key)
                return
            self._data.pop(object_key, None)
            if self.root:
                for path in (self._path(object_key), self._path(object_key) + _META_SUFFIX):
                    if os.path.exists(path):
                        os.remove(path)
        self.logger.debug("%s deleted %s", self.se_id, object_key)

    def objects(self) -> List[StoredObject]:
        with self._lock:
            items = list(self._objects.values()) + list(self._cache_meta.values())
        return sorted(items, key=lambda item: item.object_key)

    def snapshot(self) -> List[Dict[str, object]]:
        return [dict(asdict(item), se_id=self.se_id) for item in self.objects()]

    # cache

    def cache_put(self, object_key: str, data: bytes, owner_vo: str) -> str:
        """Keep a temporary copy of a remote object, evicting least recently used."""
        if len(data) > self.cache_bytes:
            raise GridError(
                "CapacityExceeded",
                f"{len(data)} bytes exceed the {self.cache_bytes}-byte cache of {self.se_id}",
            )
        checksum = sha256_hex(data)
        with self._lock:
            if object_key in self._objects:
                return checksum
            self._drop_cached(object_key)
            while self._cache and self._cache_used + len(data) > self.cache_bytes:
                evicted, _ = next(iter(self._cache.items()))
                self.logger.debug("%s evicted %s from cache", self.se_id, evicted)
                self._drop_cached(evicted)
            self._cache[object_key] = bytes(data)
            self._cache_meta[object_key] = StoredObject(
                object_key, len(data), checksum, owner_vo, CACHE_PROVENANCE
            )
            self._cache_used += len(data)
        return checksum

    def cached_keys(self) -> List[str]:
        """Cached object keys, least recently used first."""
        with self._lock:
            return list(self._cache)

    @property
    def cache_used(self) -> int:
        return self._cache_used

    def _drop_cached(self, object_key: str):
        data = self._cache.pop(object_key, None)
        if data is not None:
            self._cache_used -= len(data)
            self._cache_meta.pop(object_key, None)

    # disk

    def _path(self, object_key: str) -> str:
        assert self.root is not None
        safe = object_key.replace("/", "_")
        return os.path.join(self.root, safe)

    def _read(self, object_key: str) -> bytes:
        if not self.root:
            return self._data[object_key]
        try:
            with open(self._path(object_key), "rb") as file_obj:
                return file_obj.read()
        except OSError as exc:
            raise GridError("NotFound", f"{self.se_id}/{object_key}: {exc}") from exc

    def _write(self, object_key: str, data: bytes, meta: StoredObject):
        path = self._path(object_key)
        try:
            _atomic_write(path, data)
            _atomic_write(path + _META_SUFFIX, json.dumps(asdict(meta)).encode("utf-8"))
        except OSError as exc:
            raise GridError("StorageError", f"cannot write {path}: {exc}") from exc

    def _load(self):
        assert self.root is not None
        for name in sorted(os.listdir(self.root)):
            if not name.endswith(_META_SUFFIX):
                continue
            try:
                with open(os.path.join(self.root, name), "r", encoding="utf-8") as file_obj:
                    meta = StoredObject(**json.load(file_obj))
            except (OSError, ValueError, TypeError) as exc:
                self.logger.warning("Skipping unreadable object metadata %s: %s", name, exc)
                continue
            self._objects[meta.object_key] = meta
        self.logger.info("%s loaded %s objects from %s", self.se_id, len(self._objects), self.root)


def _atomic_write(path: str, data: bytes):
    directory = os.path.dirname(path)
    fd, temp_path = tempfile.mkstemp(prefix=".obj-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as file_obj:
            file_obj.write(data)
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
