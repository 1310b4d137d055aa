"""Minimal PNG codec for 8-bit RGB rasters.

The encoder is deliberately fixed (filter type 0 on every scanline, zlib level 6,
no ancillary chunks) so identical pixels always produce identical bytes.  The
decoder accepts every standard colour type and bit depth, including Adam7
interlacing, and normalises the result to an ``(height, width, 3)`` uint8 array.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

SIGNATURE = b"\x89PNG\r\n\x1a\n"

_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}
_ALLOWED_DEPTHS = {
    0: (1, 2, 4, 8, 16),
    2: (8, 16),
    3: (1, 2, 4, 8),
    4: (8, 16),
    6: (8, 16),
}
# (x0, y0, dx, dy) for the seven Adam7 passes
_ADAM7 = (
    (0, 0, 8, 8),
    (4, 0, 8, 8),
    (0, 4, 4, 8),
    (2, 0, 4, 4),
    (0, 2, 2, 4),
    (1, 0, 2, 2),
    (0, 1, 1, 2),
)

ZLIB_LEVEL = 6


class PngError(ValueError):
    """Raised for malformed or unsupported PNG input.

    ``offset`` is the byte position in the input where the problem was found.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _chunk(tag: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(tag + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", crc)


def encode_rgb(pixels: np.ndarray, level: int = ZLIB_LEVEL) -> bytes:
    """Encode an ``(h, w, 3)`` uint8 array as an 8-bit truecolour PNG.

    ``level`` is the zlib level; 0 stores the data uncompressed, which is much
    faster for the small noisy tiles sent to a local model server.
    """
    height, width, _ = pixels.shape
    rows = np.empty((height, 1 + 3 * width), dtype=np.uint8)
    rows[:, 0] = 0
    rows[:, 1:] = pixels.reshape(height, 3 * width)
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return b"".join(
        (
            SIGNATURE,
            _chunk(b"IHDR", ihdr),
            _chunk(b"IDAT", zlib.compress(rows.tobytes(), level)),
            _chunk(b"IEND", b""),
        )
    )


def _read_chunks(data: bytes):
    if len(data) < len(SIGNATURE) or data[: len(SIGNATURE)] != SIGNATURE:
        raise PngError("missing PNG signature", 0)
    pos = len(SIGNATURE)
    while True:
        if pos + 8 > len(data):
            raise PngError("truncated chunk header", pos)
        length, tag = struct.unpack(">I4s", data[pos : pos + 8])
        end = pos + 8 + length
        if end + 4 > len(data):
            raise PngError(f"truncated {tag!r} chunk", pos)
        body = data[pos + 8 : end]
        (crc,) = struct.unpack(">I", data[end : end + 4])
        if zlib.crc32(tag + body) & 0xFFFFFFFF != crc:
            raise PngError(f"CRC mismatch in {tag!r} chunk", end)
        yield pos, tag, body
        pos = end + 4
        if tag == b"IEND":
            return


def _paeth_row(cur: bytearray, prev: bytes, bpp: int) -> None:
    for i in range(len(cur)):
        a = cur[i - bpp] if i >= bpp else 0
        b = prev[i]
        c = prev[i - bpp] if i >= bpp else 0
        p = a + b - c
        pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
        if pa <= pb and pa <= pc:
            pred = a
        elif pb <= pc:
            pred = b
        else:
            pred = c
        cur[i] = (cur[i] + pred) & 0xFF


def _unfilter(raw: bytes, offset: int, rows: int, stride: int, bpp: int, where: int):
    """Undo scanline filters; returns (rows, stride) uint8 array and new offset."""
    need = rows * (stride + 1)
    if offset + need > len(raw):
        raise PngError("image data shorter than declared dimensions", where)
    block = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset).reshape(rows, stride + 1)
    if not block[:, 0].any():
        return block[:, 1:].copy(), offset + need
    out = np.zeros((rows, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for r in range(rows):
        ftype = raw[offset]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=offset + 1)
        offset += stride + 1
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:
            cur = line.astype(np.int64).reshape(-1, bpp) if stride % bpp == 0 else None
            if cur is not None:
                cur = (np.cumsum(cur, axis=0) & 0xFF).astype(np.uint8).ravel()
            else:
                buf = bytearray(line.tobytes())
                for i in range(bpp, stride):
                    buf[i] = (buf[i] + buf[i - bpp]) & 0xFF
                cur = np.frombuffer(bytes(buf), dtype=np.uint8)
        elif ftype == 2:
            cur = line + prev
        elif ftype == 3:
            buf = bytearray(line.tobytes())
            up = prev.tobytes()
            for i in range(stride):
                left = buf[i - bpp] if i >= bpp else 0
                buf[i] = (buf[i] + ((left + up[i]) >> 1)) & 0xFF
            cur = np.frombuffer(bytes(buf), dtype=np.uint8)
        elif ftype == 4:
            buf = bytearray(line.tobytes())
            _paeth_row(buf, prev.tobytes(), bpp)
            cur = np.frombuffer(bytes(buf), dtype=np.uint8)
        else:
            raise PngError(f"unknown filter type {ftype} on scanline {r}", where)
        out[r] = cur
        prev = out[r]
    return out, offset


def _samples(rows: np.ndarray, width: int, channels: int, depth: int) -> np.ndarray:
    """Unpack filtered scanlines into an (h, w, channels) integer sample array."""
    h = rows.shape[0]
    if depth == 8:
        flat = rows[:, : width * channels]
        return flat.reshape(h, width, channels).astype(np.uint16)
    if depth == 16:
        flat = rows[:, : width * channels * 2].reshape(h, width * channels, 2)
        vals = (flat[..., 0].astype(np.uint16) << 8) | flat[..., 1]
        return vals.reshape(h, width, channels)
    bits = np.unpackbits(rows, axis=1)
    per = bits[:, : width * depth].reshape(h, width, depth)
    weights = (1 << np.arange(depth - 1, -1, -1)).astype(np.uint16)
    return (per * weights).sum(axis=2).astype(np.uint16).reshape(h, width, 1)


def decode_rgb(data: bytes) -> np.ndarray:
    """Decode PNG bytes to an ``(h, w, 3)`` uint8 array.

    Alpha is dropped, grey levels are replicated across channels, palettes are
    expanded and 16-bit samples keep their high byte.
    """
    header = None
    palette = None
    idat: list[bytes] = []
    idat_pos = None
    for pos, tag, body in _read_chunks(bytes(data)):
        if header is None and tag != b"IHDR":
            raise PngError("first chunk is not IHDR", pos)
        if tag == b"IHDR":
            if len(body) != 13:
                raise PngError("IHDR has wrong length", pos)
            header = struct.unpack(">IIBBBBB", body)
            width, height, depth, ctype, comp, filt, interlace = header
            if width == 0 or height == 0:
                raise PngError("zero image dimension", pos)
            if ctype not in _CHANNELS or depth not in _ALLOWED_DEPTHS[ctype]:
                raise PngError(f"unsupported colour type {ctype} / bit depth {depth}", pos)
            if comp != 0 or filt != 0 or interlace not in (0, 1):
                raise PngError("unsupported compression, filter or interlace method", pos)
        elif tag == b"PLTE":
            if len(body) % 3 or not body:
                raise PngError("palette length is not a multiple of 3", pos)
            palette = np.frombuffer(body, dtype=np.uint8).reshape(-1, 3)
        elif tag == b"IDAT":
            if idat_pos is None:
                idat_pos = pos
            idat.append(body)
    if header is None:
        raise PngError("no IHDR chunk", len(SIGNATURE))
    if not idat:
        raise PngError("no IDAT chunk", len(data))
    width, height, depth, ctype, _, _, interlace = header
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise PngError(f"corrupt zlib stream: {exc}", idat_pos) from None

    channels = _CHANNELS[ctype]
    bpp = max(1, channels * depth // 8)
    samples = np.zeros((height, width, channels), dtype=np.uint16)
    if interlace == 0:
        stride = (width * channels * depth + 7) // 8
        rows, _ = _unfilter(raw, 0, height, stride, bpp, idat_pos)
        samples[:] = _samples(rows, width, channels, depth)
    else:
        offset = 0
        for x0, y0, dx, dy in _ADAM7:
            pw = (width - x0 + dx - 1) // dx if width > x0 else 0
            ph = (height - y0 + dy - 1) // dy if height > y0 else 0
            if pw == 0 or ph == 0:
                continue
            stride = (pw * channels * depth + 7) // 8
            rows, offset = _unfilter(raw, offset, ph, stride, bpp, idat_pos)
            samples[y0::dy, x0::dx] = _samples(rows, pw, channels, depth)

    if ctype == 3:
        if palette is None:
            raise PngError("indexed image without PLTE chunk", len(SIGNATURE))
        idx = samples[..., 0]
        if int(idx.max()) >= len(palette):
            raise PngError("palette index out of range", idat_pos)
        return palette[idx].copy()
    if depth == 16:
        samples = samples >> 8
    elif depth < 8:
        samples = samples * (255 // ((1 << depth) - 1))
    samples = samples.astype(np.uint8)
    if ctype in (0, 4):
        return np.repeat(samples[..., :1], 3, axis=2)
    return np.ascontiguousarray(samples[..., :3])
