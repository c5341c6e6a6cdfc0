from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import OrbitControlError
from .log import get_logger
from .scale import Scale
from .sft import Sft, universal_word
from .tail import SparseTail, build_tail, tail_document, tail_from_document, validate_tail

logger = get_logger(__name__)


def content_key(kind: str, payload: Any) -> str:
    blob = json.dumps({"kind": kind, "payload": payload}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@dataclass(frozen=True, slots=True)
class ContentCache:
    """Artifacts stored under ``root/<kind>/<sha256>`` by the content they derive from."""

    root: Path
    enabled: bool = True

    def _path(self, kind: str, payload: Any, suffix: str) -> Path:
        return self.root / kind / f"{content_key(kind, payload)}{suffix}"

    def get_bytes(self, kind: str, payload: Any) -> bytes | None:
        if not self.enabled:
            return None
        path = self._path(kind, payload, ".bin")
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            logger.debug("cache.miss", kind=kind)
            return None
        logger.debug("cache.hit", kind=kind, path=str(path))
        return data

    def put_bytes(self, kind: str, payload: Any, data: bytes) -> None:
        if self.enabled:
            _write_atomic(self._path(kind, payload, ".bin"), data)

    def get_json(self, kind: str, payload: Any) -> Any | None:
        if not self.enabled:
            return None
        path = self._path(kind, payload, ".json")
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            logger.debug("cache.miss", kind=kind)
            return None
        try:
            found = json.loads(text)
        except json.JSONDecodeError:
            logger.warning("cache.corrupt", kind=kind, path=str(path))
            return None
        logger.debug("cache.hit", kind=kind, path=str(path))
        return found

    def put_json(self, kind: str, payload: Any, value: Any) -> None:
        if self.enabled:
            text = json.dumps(value, sort_keys=True, separators=(",", ":"))
            _write_atomic(self._path(kind, payload, ".json"), text.encode("utf-8"))


def _tail_key(scale: Scale, depth: int) -> dict[str, Any]:
    return {"t0": scale.t0, "factors": list(scale.factors[:depth]), "depth": depth}


def _stored_tail(found: Any, key: dict[str, Any], scale: Scale) -> SparseTail | None:
    """The cached tail, or None when the entry does not describe the requested one."""
    try:
        depth = key["depth"]
        if {"t0": found["t0"], "factors": list(found["factors"])[:depth], "depth": found["depth"]} != key:
            return None
        stored = tail_from_document(found)
    except (KeyError, TypeError, ValueError, OrbitControlError):
        return None
    # The stored scale stops at depth; keep the caller's deeper one.
    tail = SparseTail(scale=scale, depth=stored.depth, components=stored.components)
    try:
        report = validate_tail(tail)
    except (IndexError, OrbitControlError):
        return None
    return tail if report.ok else None


def cached_tail(cache: ContentCache | None, scale: Scale, depth: int) -> SparseTail:
    if cache is None:
        return build_tail(scale, depth)
    key = _tail_key(scale, depth)
    found = cache.get_json("tail", key)
    if found is not None:
        tail = _stored_tail(found, key, scale)
        if tail is not None:
            return tail
        logger.warning("cache.stale", kind="tail", depth=depth)
    tail = build_tail(scale, depth)
    cache.put_json("tail", key, tail_document(tail))
    return tail


def cached_universal_word(cache: ContentCache | None, sft: Sft, m: int) -> bytes:
    if cache is None:
        return universal_word(sft, m)
    key = {"transition": [[int(x) for x in row] for row in sft.transition], "m": m}
    found = cache.get_bytes("universal", key)
    if found is not None:
        return found
    word = universal_word(sft, m)
    cache.put_bytes("universal", key, word)
    return word
