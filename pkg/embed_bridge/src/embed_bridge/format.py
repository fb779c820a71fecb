"""Writer/reader for the engine's segment-feature container.

Layout: magic "CFEA", u32 version, u32 n_files, u32 n_segments, u32 dim,
row-major little-endian f32 payload of n_files * n_segments * dim values,
then a footer: u32 id count followed by (u32 byte length, utf-8 bytes) per
file id, in row order.
"""

import struct

import numpy as np

MAGIC = b"CFEA"
VERSION = 1


def write_features(path, ids, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 3 or arr.shape[0] != len(ids):
        raise ValueError(f"expected (n_files, n_segments, dim) with {len(ids)} ids, "
                         f"got {arr.shape}")
    n_files, n_seg, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, n_files, n_seg, dim))
        fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(ids)))
        for raw in ids:
            blob = str(raw).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_features(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, n_files, n_seg, dim = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 20
    arr = np.frombuffer(data, dtype="<f4", count=n_files * n_seg * dim, offset=off)
    arr = arr.reshape(n_files, n_seg, dim).copy()
    off += n_files * n_seg * dim * 4
    (n_ids,) = struct.unpack_from("<I", data, off)
    off += 4
    ids = []
    for _ in range(n_ids):
        (blen,) = struct.unpack_from("<I", data, off)
        off += 4
        ids.append(data[off:off + blen].decode("utf-8"))
        off += blen
    return ids, arr
