"""Binary container and CSV export for kernel matrices and cumulant tensors.

Container layout (all little-endian):

    bytes 0-7    magic b"NNSPTNSR"
    uint32       format version (1)
    uint32       rank r (2 for a kernel matrix, 4 for a cumulant)
    uint32       dtype code (1 = float64)
    uint32       packed flag (1 = unique sorted index tuples only)
    r x uint64   dimension of each axis
    uint64       number of stored values
    float64[]    values, row-major (dense) or colex order of sorted tuples (packed)
"""

from __future__ import annotations

import csv
import itertools
import struct

import numpy as np

MAGIC = b"NNSPTNSR"
VERSION = 1
F64 = 1
_HEAD = struct.Struct("<8sIIII")


def write_tensor(path, values, dims=None, packed=False):
    values = np.ascontiguousarray(values, dtype="<f8")
    if dims is None:
        if packed:
            raise ValueError("packed storage needs explicit dims")
        dims = values.shape
    dims = tuple(int(x) for x in dims)
    flat = values.reshape(-1)
    if not packed and flat.size != int(np.prod(dims)):
        raise ValueError("value count does not match dims")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(dims), F64, int(bool(packed))))
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def read_tensor(path):
    """Returns (values, dims, packed).  Dense values come back reshaped to dims."""
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise ValueError("truncated header")
        magic, version, rank, dtype, packed = _HEAD.unpack(head)
        if magic != MAGIC:
            raise ValueError("not an nnsp tensor file")
        if version != VERSION or dtype != F64:
            raise ValueError(f"unsupported version {version} / dtype {dtype}")
        tail = fh.read(8 * rank + 8)
        if len(tail) < 8 * rank + 8:
            raise ValueError("truncated header")
        *dims, count = struct.unpack(f"<{rank + 1}Q", tail)
        data = np.frombuffer(fh.read(8 * count), dtype="<f8")
    if len(data) != count:
        raise ValueError("truncated body")
    data = data.astype(float)
    return (data if packed else data.reshape(dims)), tuple(dims), bool(packed)


def save_kernel(path, K):
    write_tensor(path, np.asarray(K, dtype=float))


def load_kernel(path):
    values, dims, _ = read_tensor(path)
    if len(dims) != 2:
        raise ValueError(f"expected a rank-2 container, found rank {len(dims)}")
    return values


def save_cumulant(path, cumulant):
    """Stores a FourthCumulant in packed form."""
    write_tensor(path, cumulant.values, dims=(cumulant.n_points,) * 4, packed=True)


def load_cumulant(path):
    from .cumulants import FourthCumulant

    values, dims, packed = read_tensor(path)
    if len(dims) != 4:
        raise ValueError(f"expected a rank-4 container, found rank {len(dims)}")
    if not packed:
        raise ValueError("dense rank-4 containers are not cumulants; use read_tensor")
    return FourthCumulant(values, dims[0])


def kernel_to_csv(path, K):
    K = np.asarray(K, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["i", "j", "value"])
        for i, j in itertools.product(range(K.shape[0]), range(K.shape[1])):
            w.writerow([i, j, repr(float(K[i, j]))])


def cumulant_to_csv(path, cumulant):
    """One row per unique sorted quadruple."""
    from .cumulants import sorted_tuples

    idx = sorted_tuples(cumulant.n_points, 4)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["a1", "a2", "a3", "a4", "value"])
        for t, v in zip(idx, cumulant.values):
            w.writerow([*map(int, t), repr(float(v))])


def series_to_csv(path, result, probe_ids=None):
    """Thinned probe outputs of a chain: epoch, probe_id, value, seed (first output channel)."""
    S = result.series
    seeds = result.seeds
    probe_ids = range(S.shape[2]) if probe_ids is None else probe_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["epoch", "probe_id", "value", "seed"])
        for k, e in enumerate(result.series_epochs):
            for s, sd in enumerate(seeds):
                for p, pid in enumerate(probe_ids):
                    w.writerow([int(e), pid, repr(float(S[k, s, p, 0])), int(sd)])
