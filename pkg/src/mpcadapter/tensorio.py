"""Tensor and weights-directory serialization.

Tensor binary format (little-endian):
  magic "CPFT" | format version u16 = 1 | rank u16 | rank x u64 dims | payload

The payload dtype is not part of the header; it is declared in the JSON
manifest next to the payload ("f32" = row-major IEEE-754 single, encoded
to ring elements on load; "u64ring" = raw ring elements).

A weights directory holds manifest.json plus weights.bin, the
concatenation of the tensor records in manifest order.
"""

import io
import json
import struct
from pathlib import Path

import numpy as np

from .ring import FixedPointConfig, FixedTensor, encode_fixed

MAGIC = b"CPFT"
VERSION = 1

DTYPES = ("f32", "u64ring")


class TensorFormatError(ValueError):
    pass


def write_tensor(buf, array: np.ndarray, dtype: str):
    if dtype not in DTYPES:
        raise TensorFormatError(f"unknown payload dtype {dtype!r}")
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, array.ndim))
    buf.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    if dtype == "f32":
        payload = np.ascontiguousarray(array, dtype="<f4")
    else:
        payload = np.ascontiguousarray(array, dtype="<u8")
    buf.write(payload.tobytes())


def read_tensor(buf, dtype: str) -> np.ndarray:
    if dtype not in DTYPES:
        raise TensorFormatError(f"unknown payload dtype {dtype!r}")
    magic = buf.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<HH", buf.read(4))
    if version != VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    itemsize = 4 if dtype == "f32" else 8
    raw = buf.read(count * itemsize)
    if len(raw) != count * itemsize:
        raise TensorFormatError("truncated tensor payload")
    kind = "<f4" if dtype == "f32" else "<u8"
    return np.frombuffer(raw, dtype=kind).reshape(shape).copy()


def save_tensor_file(path, array: np.ndarray, dtype: str = "f32"):
    with open(path, "wb") as fh:
        write_tensor(fh, array, dtype)


def load_tensor_file(path, dtype: str = "f32") -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh, dtype)


def tensor_as_fixed(array: np.ndarray, dtype: str, cfg: FixedPointConfig) -> FixedTensor:
    if dtype == "f32":
        return FixedTensor(encode_fixed(array.astype(np.float64), cfg), cfg)
    return FixedTensor(array.astype(np.uint64), cfg)


def save_weights_dir(path, tensors: dict, meta: dict, cfg: FixedPointConfig,
                     dtype: str = "f32"):
    """Write manifest.json + weights.bin for a named tensor collection."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = io.BytesIO()
    for name, tensor in tensors.items():
        array = tensor.to_real() if dtype == "f32" else tensor.data
        entries.append({"name": name, "shape": list(tensor.shape), "dtype": dtype})
        write_tensor(blob, array, dtype)
    manifest = {
        "format_version": VERSION,
        "frac_bits": cfg.frac_bits,
        "tensors": entries,
        **meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (path / "weights.bin").write_bytes(blob.getvalue())


def load_weights_dir(path, cfg: FixedPointConfig = None):
    """Read a weights directory; returns (tensors by name, manifest)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if cfg is None:
        cfg = FixedPointConfig(frac_bits=manifest["frac_bits"])
    tensors = {}
    with open(path / "weights.bin", "rb") as fh:
        for entry in manifest["tensors"]:
            array = read_tensor(fh, entry["dtype"])
            if list(array.shape) != list(entry["shape"]):
                raise TensorFormatError(
                    f"shape mismatch for {entry['name']}: manifest says "
                    f"{entry['shape']}, payload has {list(array.shape)}"
                )
            tensors[entry["name"]] = tensor_as_fixed(array, entry["dtype"], cfg)
    return tensors, manifest
