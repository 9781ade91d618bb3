"""Binary container for named tensors.

Layout (all integers little-endian):

    magic     8 bytes  b"GLTENSR1"
    version   u32      currently 1
    count     u64      number of records
    record:   u32 name length, UTF-8 name,
              u8 dtype tag (0=f32, 1=f64, 2=raw bytes),
              u64 rank, rank x u64 extents,
              raw little-endian values

Round-trips are bit-exact; the raw-bytes tag carries JSON manifests such
as a checkpoint's model config.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GLTENSR1"
VERSION = 1

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_REV = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


class ContainerError(ValueError):
    pass


def save_tensors(path, entries):
    """Write ``entries`` (an ordered mapping name -> ndarray) to ``path``."""
    items = list(entries.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _REV:
                raise ContainerError(f"unsupported dtype {arr.dtype} for entry {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", _REV[arr.dtype]))
            fh.write(struct.pack("<Q", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<Q", ext))
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(le.tobytes())


def load_tensors(path):
    """Read a container back into an ordered ``{name: ndarray}`` dict."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ContainerError(f"{path}: bad magic, not a tensor container")
        version, count = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (tag,) = struct.unpack("<B", fh.read(1))
            if tag not in _TAGS:
                raise ContainerError(f"{path}: unknown dtype tag {tag} for {name!r}")
            (rank,) = struct.unpack("<Q", fh.read(8))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            dt = _TAGS[tag]
            nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            data = fh.read(nbytes)
            if len(data) != nbytes:
                raise ContainerError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(data, dtype=dt).reshape(shape)
            out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(shape)
    return out
