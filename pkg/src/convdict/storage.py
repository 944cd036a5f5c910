"""Directory-based tensor storage.

A stored object is a directory holding: header.txt (key=value metadata),
manifest.txt (one line per tensor: name, rank, dims, data file), and raw
little-endian float64 row-major .bin files. Round trips are bit-exact.
Writes go through a temp file then an atomic rename.
"""

from __future__ import annotations

import os

import numpy as np


class StorageError(IOError):
    """Malformed or inconsistent stored object."""


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _safe_name(name: str) -> str:
    return name.replace("/", ".")


def write_dir(path: str, header: dict, tensors: dict[str, np.ndarray]) -> None:
    os.makedirs(path, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        fname = _safe_name(name) + ".bin"
        _atomic_write_bytes(os.path.join(path, fname),
                            a.astype("<f8", copy=False).tobytes())
        dims = " ".join(str(d) for d in a.shape)
        lines.append(f"{name} {a.ndim} {dims} {fname}")
    _atomic_write_bytes(os.path.join(path, "manifest.txt"),
                        ("\n".join(lines) + "\n").encode())
    hdr = "".join(f"{k}={v}\n" for k, v in header.items())
    _atomic_write_bytes(os.path.join(path, "header.txt"), hdr.encode())


def read_dir(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    header_path = os.path.join(path, "header.txt")
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.isfile(header_path) or not os.path.isfile(manifest_path):
        raise StorageError(f"{path}: not a stored object (missing header or manifest)")
    header = {}
    with open(header_path, "r") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise StorageError(f"bad header line: {line!r}")
            k, v = line.split("=", 1)
            header[k] = v
    tensors = {}
    with open(manifest_path, "r") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            name = parts[0]
            ndim = int(parts[1])
            dims = tuple(int(d) for d in parts[2:2 + ndim])
            fname = parts[2 + ndim]
            raw_path = os.path.join(path, fname)
            expect = int(np.prod(dims)) * 8 if dims else 8
            size = os.path.getsize(raw_path)
            if size != expect:
                raise StorageError(f"{fname}: expected {expect} bytes, found {size}")
            data = np.fromfile(raw_path, dtype="<f8").astype(np.float64, copy=False)
            tensors[name] = data.reshape(dims)
    return header, tensors
