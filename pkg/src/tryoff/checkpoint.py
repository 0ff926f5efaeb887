"""Single-file binary checkpoint format.

Layout (all integers little-endian):

    offset 0      : 1 version byte (currently 0x01)
    offset 1      : uint32, byte length M of the manifest
    offset 5      : manifest, UTF-8 text; one line per entry:
                        name TAB dim0,dim1,... TAB trainable(0|1) TAB payload_offset
                    a scalar entry uses the dimension string "scalar";
                    payload_offset is in bytes, relative to the payload start
    offset 5 + M  : payload, concatenated raw little-endian float32 arrays

The same container stores model parameters, optimizer state and metadata
scalars; entry names are namespaced (e.g. "opt.m.<param>", "meta.step").
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, Tuple

import numpy as np

from .errors import DataError, StateError
from .tensor import Parameter

FORMAT_VERSION = 1


def _dims_str(shape: tuple) -> str:
    return "scalar" if shape == () else ",".join(str(d) for d in shape)


def _parse_dims(s: str) -> tuple:
    if s == "scalar":
        return ()
    return tuple(int(d) for d in s.split(","))


def save_arrays(path, arrays: Dict[str, np.ndarray],
                trainable: Dict[str, bool] | None = None) -> None:
    trainable = trainable or {}
    manifest_lines = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest_lines.append(
            f"{name}\t{_dims_str(arr.shape)}\t{1 if trainable.get(name, False) else 0}\t{len(payload)}")
        payload += arr.tobytes()
    manifest = ("\n".join(manifest_lines) + "\n").encode("utf-8")
    blob = bytes([FORMAT_VERSION]) + struct.pack("<I", len(manifest)) + manifest + bytes(payload)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], Dict[str, bool]]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 5:
        raise DataError(f"checkpoint too short: {path}")
    if blob[0] != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {blob[0]} in {path}")
    mlen = struct.unpack("<I", blob[1:5])[0]
    manifest = blob[5:5 + mlen].decode("utf-8")
    payload = blob[5 + mlen:]
    arrays: Dict[str, np.ndarray] = {}
    trainable: Dict[str, bool] = {}
    for line in manifest.splitlines():
        if not line:
            continue
        name, dims, flag, off = line.split("\t")
        shape = _parse_dims(dims)
        count = int(np.prod(shape)) if shape else 1
        start = int(off)
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[name] = arr.astype(np.float32).copy()
        trainable[name] = flag == "1"
    return arrays, trainable


def save_params(path, params: Iterable[Parameter],
                extra: Dict[str, np.ndarray] | None = None) -> None:
    arrays: Dict[str, np.ndarray] = {}
    flags: Dict[str, bool] = {}
    for p in params:
        arrays[p.name] = p.value.data
        flags[p.name] = p.trainable
    if extra:
        arrays.update(extra)
    save_arrays(path, arrays, flags)


def load_into(path, params: Iterable[Parameter], strict: bool = True) -> Dict[str, np.ndarray]:
    """Load a checkpoint into existing parameters; returns leftover entries."""
    arrays, _ = load_arrays(path)
    remaining = dict(arrays)
    for p in params:
        if p.name not in arrays:
            if strict:
                raise StateError(f"checkpoint {path} is missing parameter {p.name}")
            continue
        arr = remaining.pop(p.name)
        if arr.shape != p.value.data.shape:
            raise StateError(
                f"checkpoint shape mismatch for {p.name}: file {arr.shape} vs model {p.value.data.shape}")
        p.value.data = arr.astype(np.float32).copy()
    return remaining
