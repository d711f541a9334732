"""Deterministic binary container: one JSON header line plus raw little-endian blocks.

Used for network checkpoints, full model checkpoints and terrain bundles.
The format is byte-stable: identical inputs always produce identical files,
which the reproducibility guarantees of the training pipeline rely on.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import SerializationError

MAGIC = "SGPC1"

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "<f8"
    if arr.dtype.kind in ("i", "u", "b"):
        return "<i8"
    raise SerializationError(f"unsupported block dtype {arr.dtype}")


def container_bytes(kind: str, meta: dict, blocks: list[np.ndarray]) -> bytes:
    """Serialize to bytes. meta must be JSON-encodable."""
    entries = []
    payload = []
    for arr in blocks:
        arr = np.asarray(arr)
        tag = _canonical_dtype(arr)
        entries.append({"dtype": tag, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    header = {"magic": MAGIC, "kind": kind, "meta": meta, "blocks": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    return head.encode("utf-8") + b"".join(payload)


def write_container(path: str, kind: str, meta: dict, blocks: list[np.ndarray]) -> None:
    data = container_bytes(kind, meta, blocks)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_container(data: bytes, kind: str | None = None) -> tuple[dict, list[np.ndarray]]:
    newline = data.find(b"\n")
    if newline < 0:
        raise SerializationError("container has no header line")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SerializationError(f"container header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise SerializationError("bad magic: not a scoopgp container")
    if kind is not None and header.get("kind") != kind:
        raise SerializationError(f"expected container kind {kind!r}, found {header.get('kind')!r}")
    blocks = []
    offset = newline + 1
    for entry in header.get("blocks", []):
        tag = entry["dtype"]
        if tag not in _DTYPES:
            raise SerializationError(f"unsupported block dtype {tag!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise SerializationError("container truncated: block shorter than header declares")
        blocks.append(np.frombuffer(chunk, dtype=_DTYPES[tag]).reshape(shape).copy())
        offset += nbytes
    if offset != len(data):
        raise SerializationError("container has trailing bytes past declared blocks")
    return header["meta"], blocks


def read_container(path: str, kind: str | None = None) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_container(data, kind)
