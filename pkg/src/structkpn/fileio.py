"""Binary PGM images and a raw little-endian float64 tensor container.

Images are stored as P5 PGM, 8-bit or 16-bit (16-bit samples big-endian per
the format), and map linearly to [0,1] floats on read. Maps whose natural
range is not [0,1] are rescaled on write, with the true min/max recorded in a
small text sidecar next to the image. Tensors use a fixed tagged layout so
round-trips are byte-identical.
"""

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "read_pgm",
    "write_pgm",
    "write_scaled_pgm",
    "read_minmax",
    "write_tensor",
    "read_tensor",
    "TENSOR_MAGIC",
]

TENSOR_MAGIC = b"SKTD"
TENSOR_VERSION = 1


def _read_header_tokens(f, count):
    """Next ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    while len(tokens) < count:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated PGM header")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        tok = ch
        while True:
            ch = f.read(1)
            if not ch or ch in b" \t\r\n":
                break
            tok += ch
        tokens.append(tok)
    return tokens


def read_pgm(path):
    """Load a binary PGM as float64 in [0,1] (sample / maxval)."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(2) != b"P5":
            raise ValueError(f"{path}: not a binary PGM (P5) file")
        w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if w < 1 or h < 1:
            raise ValueError(f"{path}: bad PGM dimensions {w}x{h}")
        if not 0 < maxval < 65536:
            raise ValueError(f"{path}: PGM maxval {maxval} out of range")
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = f.read(w * h * dtype.itemsize)
        if len(raw) != w * h * dtype.itemsize:
            raise ValueError(f"{path}: truncated PGM pixel data")
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return img.astype(np.float64) / maxval


def write_pgm(path, img, maxval=65535):
    """Quantize a [0,1] image to PGM. 16-bit samples are written big-endian."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D image, got shape {img.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"write_pgm: maxval {maxval} out of range")
    q = np.round(np.clip(img, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(q.astype(dtype).tobytes())
    return path


def write_scaled_pgm(path, arr, maxval=65535):
    """Write an arbitrary-range map rescaled to [0,1], plus a min/max sidecar.

    A constant map writes as all zeros. Returns (pgm_path, sidecar_path);
    the sidecar is ``<pgm path>.minmax.txt`` holding the original range.
    """
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    scaled = (arr - lo) / span if span > 0 else np.zeros_like(arr)
    pgm_path = write_pgm(path, scaled, maxval)
    sidecar = Path(str(pgm_path) + ".minmax.txt")
    sidecar.write_text(f"min {lo!r}\nmax {hi!r}\n", encoding="ascii")
    return pgm_path, sidecar


def read_minmax(sidecar_path):
    lines = Path(sidecar_path).read_text(encoding="ascii").split()
    if len(lines) != 4 or lines[0] != "min" or lines[2] != "max":
        raise ValueError(f"{sidecar_path}: malformed min/max sidecar")
    return float(lines[1]), float(lines[3])


def write_tensor(path, arr):
    """Serialize one float64 array: magic, version, rank, dims, LE payload."""
    # ascontiguousarray would turn 0-d scalars into shape (1,)
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", TENSOR_VERSION))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f8").tobytes())
    return path


def read_tensor(path):
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a tensor file (bad magic)")
        version, = struct.unpack("<I", f.read(4))
        if version != TENSOR_VERSION:
            raise ValueError(f"{path}: unsupported tensor version {version}")
        rank, = struct.unpack("<I", f.read(4))
        if rank > 32:
            raise ValueError(f"{path}: implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = f.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"{path}: truncated tensor payload")
    return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
