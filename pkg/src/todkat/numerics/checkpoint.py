"""Binary checkpoint format for named float64 parameter sets.

Layout (all integers little-endian):

    magic   4 bytes  b"TDK1"
    version u32      currently 1
    then, per parameter, in insertion order:
      name_len u32, name utf-8, rank u32, extents rank*u64,
      payload  product(extents) float64

The stream ends at EOF. Round-trips are bit-exact.
"""

import struct
from collections import OrderedDict

import numpy as np

from ..errors import DataFormatError

MAGIC = b"TDK1"
VERSION = 1


def save_params(path, params):
    """Write a name -> float64 ndarray mapping."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in params.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            for ext in a.shape:
                f.write(struct.pack("<Q", ext))
            f.write(a.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(f, n, what, path):
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            "%s: truncated checkpoint while reading %s" % (path, what)
        )
    return buf


def load_params(path):
    """Read a checkpoint back as an OrderedDict of float64 arrays."""
    out = OrderedDict()
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DataFormatError(
                "%s: bad magic %r (not a parameter checkpoint)" % (path, magic)
            )
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version", path))
        if version != VERSION:
            raise DataFormatError(
                "%s: unsupported checkpoint version %d" % (path, version)
            )
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataFormatError("%s: truncated name length" % path)
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "name", path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank", path))
            if rank > 2:
                raise DataFormatError(
                    "%s: parameter %r has rank %d (max 2)" % (path, name, rank)
                )
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8, "extent", path))[0]
                for _ in range(rank)
            )
            count = 1
            for ext in shape:
                count *= ext
            payload = _read_exact(f, 8 * count, "payload of %r" % name, path)
            arr = np.frombuffer(payload, dtype="<f8").reshape(shape)
            if name in out:
                raise DataFormatError(
                    "%s: duplicate parameter name %r" % (path, name)
                )
            # frombuffer views are read-only; downstream code mutates
            # parameters in place, so always hand out a fresh copy
            out[name] = arr.astype(np.float64, order="C", copy=True)
    return out
