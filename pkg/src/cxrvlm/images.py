"""Grayscale image handling: PGM/PNG codecs, stitching, resizing.

Chest X-rays are single-channel, so everything here is 8-bit luminance.
Resampling is nearest-neighbor with the index map floor(i * src / dst),
which is deterministic and codec-free.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np


class ImageFormatError(ValueError):
    """File is not a supported 8-bit grayscale PGM or PNG."""


class ImageDecodeError(ValueError):
    """Recognized format but corrupt or truncated payload."""


@dataclass
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width)
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"non-positive image extents {self.width}x{self.height}")

    @classmethod
    def from_rows(cls, rows) -> "GrayImage":
        arr = np.asarray(rows, dtype=np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


def load_image(path) -> GrayImage:
    """Decode a binary PGM (P5, maxval 255) or an 8-bit grayscale PNG."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P5":
        return _decode_pgm(data, str(path))
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(data, str(path))
    raise ImageFormatError(f"{path}: unsupported image format (need P5 PGM or grayscale PNG)")


def _decode_pgm(data: bytes, name: str) -> GrayImage:
    # Header is ASCII tokens (magic, width, height, maxval) with optional
    # '#' comments, then a single whitespace byte before the raster.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise ImageDecodeError(f"{name}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageDecodeError(f"{name}: non-numeric PGM header field") from exc
    if maxval != 255:
        raise ImageFormatError(f"{name}: PGM maxval {maxval} unsupported (need 255)")
    if width <= 0 or height <= 0:
        raise ImageDecodeError(f"{name}: bad PGM extents {width}x{height}")
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ImageDecodeError(
            f"{name}: PGM payload has {len(raster)} bytes, expected {width * height}")
    return GrayImage(width, height, np.frombuffer(raster, dtype=np.uint8))


def save_pgm(path, image: GrayImage) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(image.pixels.tobytes())


def _decode_png(data: bytes, name: str) -> GrayImage:
    pos = 8
    width = height = None
    idat = b""
    while pos + 8 <= len(data):
        length, ctype = struct.unpack_from(">I4s", data, pos)
        pos += 8
        chunk = data[pos:pos + length]
        if len(chunk) != length:
            raise ImageDecodeError(f"{name}: truncated PNG chunk {ctype!r}")
        pos += length + 4  # skip CRC
        if ctype == b"IHDR":
            width, height, depth, color, comp, filt, interlace = struct.unpack(
                ">IIBBBBB", chunk)
            if depth != 8 or color != 0:
                raise ImageFormatError(
                    f"{name}: PNG depth={depth} color={color} unsupported "
                    "(need 8-bit grayscale)")
            if comp != 0 or filt != 0 or interlace != 0:
                raise ImageFormatError(f"{name}: PNG interlace/compression variant unsupported")
        elif ctype == b"IDAT":
            idat += chunk
        elif ctype == b"IEND":
            break
    if width is None:
        raise ImageDecodeError(f"{name}: PNG missing IHDR")
    try:
        raw = zlib.decompress(idat)
    except zlib.error as exc:
        raise ImageDecodeError(f"{name}: PNG zlib stream corrupt ({exc})") from exc
    stride = width + 1
    if len(raw) != stride * height:
        raise ImageDecodeError(
            f"{name}: PNG raster has {len(raw)} bytes, expected {stride * height}")
    out = np.zeros((height, width), dtype=np.uint8)
    prev = np.zeros(width, dtype=np.uint8)
    for y in range(height):
        ftype = raw[y * stride]
        line = np.frombuffer(raw, dtype=np.uint8, count=width, offset=y * stride + 1)
        out[y] = _unfilter_scanline(ftype, line, prev, name)
        prev = out[y]
    return GrayImage(width, height, out)


def _unfilter_scanline(ftype: int, line: np.ndarray, prev: np.ndarray, name: str) -> np.ndarray:
    if ftype == 0:
        return line.copy()
    if ftype == 2:
        return (line.astype(np.int32) + prev).astype(np.uint8)
    cur = np.zeros_like(line)
    if ftype == 1:
        left = 0
        for x in range(len(line)):
            left = (int(line[x]) + left) & 0xFF
            cur[x] = left
        return cur
    if ftype == 3:
        left = 0
        for x in range(len(line)):
            left = (int(line[x]) + (left + int(prev[x])) // 2) & 0xFF
            cur[x] = left
        return cur
    if ftype == 4:
        left = ul = 0
        for x in range(len(line)):
            up = int(prev[x])
            p = left + up - ul
            pa, pb, pc = abs(p - left), abs(p - up), abs(p - ul)
            pred = left if (pa <= pb and pa <= pc) else (up if pb <= pc else ul)
            val = (int(line[x]) + pred) & 0xFF
            cur[x] = val
            left, ul = val, up
        return cur
    raise ImageDecodeError(f"{name}: PNG filter type {ftype} invalid")


def save_png(path, image: GrayImage) -> None:
    """Minimal 8-bit grayscale PNG writer (filter type 0 per scanline)."""
    def chunk(ctype: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + ctype + payload
                + struct.pack(">I", zlib.crc32(ctype + payload)))

    ihdr = struct.pack(">IIBBBBB", image.width, image.height, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + image.pixels[y].tobytes() for y in range(image.height))
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", ihdr))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(chunk(b"IEND", b""))


def _nearest_indices(dst: int, src: int) -> np.ndarray:
    return (np.arange(dst, dtype=np.int64) * src) // dst


def resize_nearest(image: GrayImage, width: int, height: int) -> GrayImage:
    """Nearest-neighbor resample; source index = floor(i * src / dst)."""
    if width <= 0 or height <= 0:
        raise ValueError(f"non-positive target extents {width}x{height}")
    rows = _nearest_indices(height, image.height)
    cols = _nearest_indices(width, image.width)
    return GrayImage(width, height, image.pixels[np.ix_(rows, cols)])


def resize_to_encoder(image: GrayImage, side: int) -> GrayImage:
    """Square resample to the encoder's input resolution (aspect ignored)."""
    return resize_nearest(image, side, side)


def stitch_horizontal(images: list[GrayImage], target_height: int) -> GrayImage:
    """Merge study images into one canvas, left to right in input order.

    Each image is rescaled to `target_height` preserving aspect ratio
    (rounded width, at least 1 px), then concatenated.
    """
    if not images:
        raise ValueError("stitch_horizontal needs at least one image")
    if target_height <= 0:
        raise ValueError(f"non-positive target height {target_height}")
    scaled = []
    for img in images:
        new_w = max(1, int(img.width * target_height / img.height + 0.5))
        scaled.append(resize_nearest(img, new_w, target_height))
    canvas = np.concatenate([s.pixels for s in scaled], axis=1)
    return GrayImage(canvas.shape[1], target_height, canvas)
