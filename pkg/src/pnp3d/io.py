"""Tensor checkpoints and point-cloud file readers.

Checkpoint layout (all integers little-endian)::

    bytes 0..7    magic b"PNP3DTN1"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header:
                  {"tensors": [{"name": str, "shape": [int, ...], "offset": int}, ...],
                   "meta": {...}}
    remainder     tensor data, float64 little-endian, row-major;
                  ``offset`` is in bytes from the start of the data section

Tensors are written in sorted name order, contiguously, so a file is a pure
function of its contents.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .spatial import PointCloud

MAGIC = b"PNP3DTN1"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class CloudParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def encode_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=_LE_F64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a pnp3d tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    data = memoryview(blob)[16 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        start = entry["offset"]
        if start + 8 * count > len(data):
            raise CheckpointError(f"tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(data[start:start + 8 * count], dtype=_LE_F64).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
    return tensors, header.get("meta", {})


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_tensors(tensors, meta))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_tensors(Path(path).read_bytes())


def _floats(tokens, path, lineno) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise CloudParseError(path, lineno, f"non-numeric value in {' '.join(tokens)!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise CloudParseError(path, lineno, "non-finite coordinate")
    return vals


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def load_xyz(path) -> PointCloud:
    """Whitespace-separated ``x y z [r g b]`` rows; colours in [0, 255] become [0, 1]."""
    coords, colours = [], []
    width = None
    for lineno, tokens in _content_lines(Path(path).read_text()):
        if len(tokens) not in (3, 6):
            raise CloudParseError(path, lineno, f"expected 3 or 6 columns, got {len(tokens)}")
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise CloudParseError(path, lineno, f"row has {len(tokens)} columns, earlier rows have {width}")
        vals = _floats(tokens, path, lineno)
        coords.append(vals[:3])
        if width == 6:
            colours.append(vals[3:])
    if not coords:
        raise CloudParseError(path, 0, "no points found")
    attrs = np.array(colours) / 255.0 if colours else None
    return PointCloud(np.array(coords), attrs)


def load_off(path) -> PointCloud:
    """OFF mesh vertices; faces are ignored."""
    lines = list(_content_lines(Path(path).read_text()))
    if not lines:
        raise CloudParseError(path, 1, "empty file")
    lineno, tokens = lines[0]
    rest = lines[1:]
    if tokens[0] != "OFF":
        # "OFF" fused with the counts line, as some exporters write it
        if not tokens[0].startswith("OFF"):
            raise CloudParseError(path, lineno, "missing OFF header")
        rest = [(lineno, [tokens[0][3:], *tokens[1:]])] + rest
    elif len(tokens) > 1:
        rest = [(lineno, tokens[1:])] + rest
    if not rest:
        raise CloudParseError(path, lineno, "missing counts line")
    lineno, counts = rest[0]
    try:
        n_vert = int(counts[0])
    except (ValueError, IndexError):
        raise CloudParseError(path, lineno, "malformed counts line") from None
    body = rest[1:]
    if len(body) < n_vert:
        raise CloudParseError(path, lineno, f"header declares {n_vert} vertices, file has {len(body)} rows")
    coords = []
    for lineno, tokens in body[:n_vert]:
        if len(tokens) < 3:
            raise CloudParseError(path, lineno, "vertex row needs 3 coordinates")
        coords.append(_floats(tokens[:3], path, lineno))
    if not coords:
        raise CloudParseError(path, lineno, "no vertices")
    return PointCloud(np.array(coords))


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".off":
        return load_off(path)
    with path.open() as fh:
        head = fh.readline().strip()
    if head.startswith("OFF"):
        return load_off(path)
    return load_xyz(path)
