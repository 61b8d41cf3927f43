"""Binary container of named float32 tensors.

Layout (all integers little-endian uint32)::

    magic b"DSNC" | version | tensor count
    per tensor: name length | utf-8 name | rank | dims... | raw float32 LE data
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DSNC"
VERSION = 1
NOISE_PREFIX = "noise.beta."


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    view = memoryview(buf)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("checkpoint truncated", pos)
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    out = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(buf):
            raise FormatError("checkpoint truncated in tensor name", pos)
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise FormatError(f"checkpoint truncated in tensor {name!r}", pos)
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float32).reshape(dims)
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def model_tensors(model, noise=None):
    tensors = dict(model.weights)
    if noise is not None:
        for layer, beta in noise.beta.items():
            tensors[f"{NOISE_PREFIX}{layer}"] = beta
    return tensors


def restore_weights(model, tensors):
    """Copy checkpoint tensors into ``model.weights``; returns the leftover entries."""
    rest = {}
    for name, arr in tensors.items():
        if name in model.weights:
            if model.weights[name].shape != arr.shape:
                raise FormatError(f"tensor {name!r} has shape {arr.shape}, model expects {model.weights[name].shape}")
            model.weights[name] = arr.copy()
        else:
            rest[name] = arr
    missing = set(model.weights) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
    return rest
