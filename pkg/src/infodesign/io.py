"""Binary file formats: grayscale PFM, IDX image tensors, and the IDIO
parameter container."""
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

IDX_UBYTE_3D = 0x00000803

CONTAINER_MAGIC = b"IDIO"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sIBII")

# kind codes stored in the container header
KIND_GAUSSIAN = 0
KIND_GMM = 1
KIND_HEIGHT_MAP = 2
KIND_LENSLETS = 3


def write_pfm(path, image):
    """Write a 2-D array as a little-endian grayscale PFM file.

    Rows are stored bottom-to-top as the format prescribes.
    """
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError(f"PFM images must be 2-D, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path):
    data = Path(path).read_bytes()
    lines = []
    pos = 0
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise ParseError(f"{path}: truncated PFM header", offset=pos)
        lines.append((pos, data[pos:end].strip()))
        pos = end + 1
    (off0, magic), (off1, dims), (off2, scale) = lines
    if magic != b"Pf":
        raise ParseError(f"{path}: expected grayscale 'Pf' magic, got {magic!r}", offset=off0)
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise ParseError(f"{path}: bad dimension line {dims!r}", offset=off1) from None
    try:
        s = float(scale)
    except ValueError:
        raise ParseError(f"{path}: bad scale line {scale!r}", offset=off2) from None
    dtype = "<f4" if s < 0 else ">f4"
    need = w * h * 4
    if len(data) - pos < need:
        raise ParseError(f"{path}: expected {need} data bytes, found {len(data) - pos}", offset=pos)
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img[::-1].astype(np.float64)


def read_idx(path, count_limit=None):
    """Read an unsigned-byte 3-D IDX tensor (``count x rows x cols``)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ParseError(f"{path}: file too short for IDX magic", offset=0)
    (magic,) = struct.unpack(">I", data[:4])
    if magic != IDX_UBYTE_3D:
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_UBYTE_3D:08x}", offset=0)
    if len(data) < 16:
        raise ParseError(f"{path}: truncated IDX dimension block", offset=4)
    count, rows, cols = struct.unpack(">III", data[4:16])
    if rows == 0 or cols == 0:
        raise ParseError(f"{path}: zero-sized IDX dimensions {rows}x{cols}", offset=8)
    need = count * rows * cols
    if len(data) - 16 < need:
        raise ParseError(f"{path}: IDX body holds {len(data) - 16} bytes, dims need {need}", offset=16)
    if count_limit is not None:
        count = min(count, count_limit)
    arr = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return arr.reshape(count, rows, cols)


def write_idx(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_UBYTE_3D, *images.shape))
        fh.write(images.tobytes())


def write_container(path, kind, dim, k, blocks):
    """Write a versioned IDIO container: header then float64 blocks."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, kind, dim, k))
        for block in blocks:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_container(path):
    """Return ``(kind, dim, k, payload)`` with payload a flat float64 array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated container header", offset=0)
    magic, version, kind, dim, k = _HEADER.unpack_from(data)
    if magic != CONTAINER_MAGIC:
        raise ParseError(f"{path}: bad container magic {magic!r}", offset=0)
    if version != CONTAINER_VERSION:
        raise ParseError(f"{path}: unsupported container version {version}", offset=4)
    body = data[_HEADER.size:]
    if len(body) % 8:
        raise ParseError(f"{path}: payload is not a whole number of float64 values", offset=_HEADER.size)
    return kind, dim, k, np.frombuffer(body, dtype="<f8").astype(np.float64)
