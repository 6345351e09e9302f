"""Checkpoint container for named parameters.

Binary layout (all integers little-endian):

    magic   7 bytes  b"T2LCKPT"
    version u32      currently 1
    records until EOF, each:
        name_len u32, name bytes (UTF-8)
        ndim u32, dims u32 * ndim
        data float32 * prod(dims)

Float payloads are stored raw, so save/load of float32 parameters is
bit-exact.
"""

import struct

import numpy as np

MAGIC = b"T2LCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(named_params, path):
    """Write an ordered {name: ndarray} mapping to `path`."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in named_params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered {name: float32 ndarray} dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = len(MAGIC) + 4
    out = {}
    while pos < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated record at byte {pos}: {exc}") from None
        if len(arr) != count:
            raise CheckpointError(f"{path}: truncated data for {name!r} at byte {pos}")
        out[name] = arr.reshape(dims).copy()
    return out
