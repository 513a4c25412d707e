"""On-disk formats: volume files, checkpoints and P5 graymaps.

Volume file::

    R25DVOL\\n
    version=1\\n
    kind=scan|mask|prob\\n
    dims=AxBxC\\n
    dtype=<f4|u1\\n
    order=abc\\n
    \\n
    <payload: a*b*c elements, little-endian, c fastest>

Checkpoint file::

    R25DCKPT\\n
    version=1\\n
    manifest_bytes=N\\n
    <N bytes of UTF-8 JSON manifest>
    <payload: arrays concatenated in manifest order>

Every manifest ``arrays`` entry holds ``name``, ``shape``, ``dtype``,
``offset`` and ``nbytes``; offsets are relative to the payload start.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"R25DVOL\n"
CHECKPOINT_MAGIC = b"R25DCKPT\n"
FORMAT_VERSION = 1
_KIND_DTYPE = {"scan": "<f4", "prob": "<f4", "mask": "u1"}
_HEADER_KEYS = ("version", "kind", "dims", "dtype", "order")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where the problem shows."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def save_volume(path, vol: np.ndarray, kind: str = "scan") -> None:
    if kind not in _KIND_DTYPE:
        raise ValueError(f"unknown volume kind {kind!r}")
    arr = np.asarray(vol)
    if arr.ndim != 3:
        raise ValueError(f"volumes have three axes, got shape {arr.shape}")
    if kind == "mask":
        bad = np.flatnonzero((arr != 0) & (arr != 1))
        if bad.size:
            raise FormatError(f"mask value {arr.ravel()[bad[0]]} at index {tuple(int(i) for i in np.unravel_index(bad[0], arr.shape))} is not 0/1")
    payload = np.ascontiguousarray(arr, dtype=_KIND_DTYPE[kind]).tobytes()
    a, b, c = arr.shape
    header = (
        f"version={FORMAT_VERSION}\nkind={kind}\ndims={a}x{b}x{c}\n"
        f"dtype={_KIND_DTYPE[kind]}\norder=abc\n\n"
    ).encode("ascii")
    Path(path).write_bytes(VOLUME_MAGIC + header + payload)


def _read_header(raw: bytes) -> tuple[dict[str, str], int]:
    if not raw.startswith(VOLUME_MAGIC):
        raise FormatError("not a volume file: bad magic", 0)
    pos = len(VOLUME_MAGIC)
    fields = {}
    for key in _HEADER_KEYS:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"header ends before {key!r}", pos)
        line = raw[pos:end].decode("ascii", errors="replace")
        k, _, v = line.partition("=")
        if k != key:
            raise FormatError(f"expected header key {key!r}, found {line!r}", pos)
        fields[k] = v
        pos = end + 1
    if raw[pos: pos + 1] != b"\n":
        raise FormatError("header not terminated by a blank line", pos)
    return fields, pos + 1


def load_volume(path, expect_kind: str | None = None) -> tuple[np.ndarray, str]:
    """Return (volume, kind). Header is validated before the payload is touched."""
    raw = Path(path).read_bytes()
    h, start = _read_header(raw)
    if h["version"] != str(FORMAT_VERSION):
        raise FormatError(f"unsupported version {h['version']}", len(VOLUME_MAGIC))
    kind = h["kind"]
    if kind not in _KIND_DTYPE:
        raise FormatError(f"unknown kind {kind!r}")
    if h["dtype"] != _KIND_DTYPE[kind]:
        raise FormatError(f"kind {kind} must be stored as {_KIND_DTYPE[kind]}, header says {h['dtype']}")
    if h["order"] != "abc":
        raise FormatError(f"unsupported axis order {h['order']!r}")
    try:
        dims = tuple(int(d) for d in h["dims"].split("x"))
    except ValueError:
        raise FormatError(f"bad dims {h['dims']!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"bad dims {h['dims']!r}")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind} volume, file holds {kind}")
    dt = np.dtype(h["dtype"])
    need = int(np.prod(dims)) * dt.itemsize
    have = len(raw) - start
    if have < need:
        raise FormatError(f"truncated payload: {have} of {need} bytes", len(raw))
    if have > need:
        raise FormatError(f"payload longer than dims {dims} allow: {have} > {need} bytes", start + need)
    vol = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=start).reshape(dims).copy()
    if kind == "mask":
        bad = np.flatnonzero(vol > 1)
        if bad.size:
            i = int(bad[0])
            raise FormatError(
                f"mask value {vol.ravel()[i]} at index {tuple(int(j) for j in np.unravel_index(i, dims))} (flat {i}) is not 0/1",
                start + i,
            )
    return vol.astype(np.float32) if kind != "mask" else vol, kind


def save_arrays(path, manifest: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    """Write a checkpoint container; ``manifest`` gains the array table."""
    table, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    body = json.dumps({**manifest, "arrays": table}, sort_keys=True, indent=1).encode("utf-8")
    head = CHECKPOINT_MAGIC + f"version={FORMAT_VERSION}\nmanifest_bytes={len(body)}\n".encode("ascii")
    Path(path).write_bytes(head + body + b"".join(chunks))


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError("not a checkpoint: bad magic", 0)
    pos = len(CHECKPOINT_MAGIC)
    lines = []
    for _ in range(2):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError("checkpoint header truncated", pos)
        lines.append(raw[pos:end].decode("ascii", errors="replace"))
        pos = end + 1
    if lines[0] != f"version={FORMAT_VERSION}":
        raise FormatError(f"unsupported checkpoint header {lines[0]!r}", len(CHECKPOINT_MAGIC))
    try:
        n = int(lines[1].partition("=")[2])
    except ValueError:
        raise FormatError(f"bad manifest length {lines[1]!r}") from None
    if len(raw) < pos + n:
        raise FormatError("manifest truncated", len(raw))
    manifest = json.loads(raw[pos: pos + n].decode("utf-8"))
    start = pos + n
    table = manifest.pop("arrays", [])
    need = sum(e["nbytes"] for e in table)
    if len(raw) - start != need:
        raise FormatError(f"payload holds {len(raw) - start} bytes, manifest lists {need}", len(raw))
    arrays = {}
    for e in table:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if count * dt.itemsize != e["nbytes"]:
            raise FormatError(f"array {e['name']!r}: shape {e['shape']} does not fit {e['nbytes']} bytes", start + e["offset"])
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=start + e["offset"]).reshape(e["shape"]).copy()
    return manifest, arrays


def export_image(path, img: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Write an 8-bit binary graymap (P5). Rows follow ``b``, columns ``c``.

    With ``normalize`` the image is min-max scaled, otherwise clamped to
    [0, 1]. Gray levels are ``rint(255 * value)`` (round half to even).
    Returns the written pixel grid.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"images have two axes, got {arr.shape}")
    if normalize:
        lo, hi = float(arr.min()), float(arr.max())
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    pix = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return pix


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos: pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos: pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("not a binary graymap", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only 8-bit graymaps are supported, maxval={maxval}")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w).copy()
