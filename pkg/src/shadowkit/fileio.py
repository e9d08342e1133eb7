"""Binary buffer and checkpoint formats.

Float map (.pfm here): little-endian, magic ``FMAP``, then uint32 width,
height, channels, followed by float32 data stored as channel planes in
row-major order. Checkpoints: magic ``CKPT``, uint32 version, uint32 count,
then per tensor a uint16 name length, utf-8 name, uint8 ndim, uint32 dims,
float32 data. Both round-trip bitwise.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLOATMAP_MAGIC = b"FMAP"
CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Corrupt or mismatching binary file."""


def save_floatmap(path, data: np.ndarray) -> None:
    """Write a (C, H, W) or (H, W) float array as a float map file."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise FormatError(f"float map wants (C, H, W), got shape {arr.shape}")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(FLOATMAP_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_floatmap(path) -> np.ndarray:
    """Read a float map file back as a (C, H, W) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FLOATMAP_MAGIC:
        raise FormatError(f"{path}: not a float map file")
    w, h, c = struct.unpack("<III", raw[4:16])
    expect = 16 + 4 * w * h * c
    if len(raw) != expect:
        raise FormatError(f"{path}: truncated ({len(raw)} bytes, expected {expect})")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(c, h, w).copy()


def floatmap_shape(path) -> tuple[int, int, int]:
    """(channels, height, width) from the header without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:4] != FLOATMAP_MAGIC:
        raise FormatError(f"{path}: not a float map file")
    w, h, c = struct.unpack("<III", head[4:16])
    return c, h, w


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays (checkpoint format)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return out


def save_gray_png(path, img: np.ndarray) -> None:
    """8-bit grayscale preview with a fixed [0, 1] -> [0, 255] mapping.

    Pure-stdlib PNG writer (single IDAT, no filtering surprises); the float
    map stays the source of truth.
    """
    import zlib

    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise FormatError(f"grayscale preview wants (H, W), got {arr.shape}")
    u8 = np.round(arr * 255.0).astype(np.uint8)
    h, w = u8.shape
    rows = b"".join(b"\x00" + u8[y].tobytes() for y in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))

    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)  # 8-bit grayscale
    png = (b"\x89PNG\r\n\x1a\n"
           + chunk(b"IHDR", header)
           + chunk(b"IDAT", zlib.compress(rows, 6))
           + chunk(b"IEND", b""))
    Path(path).write_bytes(png)
