"""On-disk formats for weight bundles and descriptors.

Binary layout (all integers little-endian)::

    magic      8 bytes   b"ODPFLWB1"
    count      uint32    number of entries
    per entry:
      name_len uint16, name (utf-8)
      ndim     uint8, dims (uint32 each)
    data       float64 little-endian, entries concatenated in table order,
               each in row-major order

The CSV form has columns ``name,index,shape,value`` with one row per scalar
and values written with 17 significant digits, so it round-trips exactly.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np

from .models import WeightBundle

MAGIC = b"ODPFLWB1"
FLOAT_FMT = "%.17g"

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


def bundle_to_bytes(bundle: WeightBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(bundle)))
    for name, arr in bundle.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in bundle.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def bundle_from_bytes(data: bytes) -> WeightBundle:
    if data[:8] != MAGIC:
        raise FormatError("bad magic bytes")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        table.append((name, shape))
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes")
    return WeightBundle(arrays)


def write_bundle(path: PathLike, bundle: WeightBundle) -> None:
    Path(path).write_bytes(bundle_to_bytes(bundle))


def read_bundle(path: PathLike) -> WeightBundle:
    return bundle_from_bytes(Path(path).read_bytes())


def bundle_to_csv(bundle: WeightBundle) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["name", "index", "shape", "value"])
    for name, arr in bundle.items():
        shape = "x".join(str(s) for s in arr.shape)
        for i, v in enumerate(arr.ravel()):
            w.writerow([name, i, shape, FLOAT_FMT % v])
    return out.getvalue()


def bundle_from_csv(text: str) -> WeightBundle:
    rows = list(csv.DictReader(io.StringIO(text)))
    order, shapes, values = [], {}, {}
    for r in rows:
        name = r["name"]
        if name not in shapes:
            order.append(name)
            shapes[name] = tuple(int(s) for s in r["shape"].split("x")) if r["shape"] else ()
            values[name] = []
        values[name].append(float(r["value"]))
    return WeightBundle({k: np.array(values[k]).reshape(shapes[k]) for k in order})


def descriptor_bundle(e: np.ndarray) -> WeightBundle:
    return WeightBundle({"descriptor": np.asarray(e, dtype=np.float64)})
