"""On-disk formats: the SMDA tensor container, PGM maps and checkpoints.

SMDA record layout (little-endian)::

    b"SMDA" | version u32 | rank u32 | extents u64 * rank | float64 payload (row-major)

A file may hold several records back to back; checkpoints use this to store
the ordered parameter list.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"SMDA"
VERSION = 1


class FormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated SMDA record")
    return buf


def read_record(f: BinaryIO) -> np.ndarray | None:
    """Read one record; ``None`` at a clean end of file."""
    magic = f.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported SMDA version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_record(f)
        if arr is None:
            raise FormatError(f"{path}: empty file")
        return arr


def save_tensors(path, arrays: Iterable) -> None:
    with open(path, "wb") as f:
        for a in arrays:
            f.write(encode_tensor(a))


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as f:
        while (arr := read_record(f)) is not None:
            out.append(arr)
    return out


def to_pgm_bytes(values) -> bytes:
    """8-bit binary PGM, min-max scaled; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM needs a 2-d map, got shape {v.shape}")
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape) if hi <= lo else (v - lo) / (hi - lo) * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, values) -> None:
    Path(path).write_bytes(to_pgm_bytes(values))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise FormatError("16-bit PGM not supported")
    pos += 1
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def save_checkpoint(net, path) -> None:
    """Parameters, then batchnorm running statistics, as consecutive SMDA
    records plus a JSON sidecar ``<path>.json`` describing the layers and
    record order."""
    path = Path(path)
    buffers = net.named_buffers()
    save_tensors(path, [p.data for p in net.parameters()] + [arr for _, arr in buffers])
    desc = net.describe()
    desc["buffers"] = [{"name": n, "shape": list(a.shape)} for n, a in buffers]
    desc["format"] = {"container": "SMDA", "version": VERSION, "records": len(desc["parameters"]) + len(buffers)}
    Path(str(path) + ".json").write_text(json.dumps(desc, indent=2))


def load_checkpoint(path):
    from .nn import Network

    path = Path(path)
    desc = json.loads(Path(str(path) + ".json").read_text())
    net = Network.from_description(desc)
    arrays = load_tensors(path)
    params = net.named_parameters()
    buffers = net.named_buffers()
    if len(arrays) != len(params) + len(buffers):
        raise FormatError(f"checkpoint has {len(arrays)} records, network needs {len(params) + len(buffers)}")
    for (name, p), arr in zip(params, arrays):
        if arr.shape != p.shape:
            raise FormatError(f"{name}: stored shape {arr.shape} != {p.shape}")
        p.data = arr.copy()
    for (name, cur), arr in zip(buffers, arrays[len(params) :]):
        if arr.shape != cur.shape:
            raise FormatError(f"{name}: stored shape {arr.shape} != {cur.shape}")
        index, attr = name.split(".")
        setattr(net.layers[int(index)], attr, arr.copy())
    return net
