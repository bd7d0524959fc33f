"""Image buffers, PGM/PPM/PNG codecs, resampling and channel helpers.

All processing happens on float64 samples in [0, 1]; 8-bit integers only
appear at the file boundary.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ImageFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """H x W x C raster of float samples in [0, 1] (C is 1 or 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected HxWx1 or HxWx3 samples, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"empty image {arr.shape}")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.data * 255.0).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


# ---------------------------------------------------------------------------
# PNM


def _pnm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(raw[start:pos])
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise ImageFormatError("PNM header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_pnm(raw: bytes) -> ImageBuffer:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM magic {magic!r} (only binary P5/P6)")
    channels = 1 if magic == b"P5" else 3
    tokens, offset = _pnm_tokens(raw[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"non-integer PNM header field in {tokens!r}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"PNM width/height must be positive, got {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"PNM maxval must be 255, got {maxval}")
    need = width * height * channels
    body = raw[2 + offset : 2 + offset + need]
    if len(body) < need:
        raise ImageFormatError(f"PNM pixel data truncated: expected {need} bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer.from_uint8(arr)


def encode_pnm(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    return header + img.to_uint8().tobytes()


# ---------------------------------------------------------------------------
# PNG


def _png_chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(payload, zlib.crc32(kind)) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def encode_png(img: ImageBuffer, level: int = 6) -> bytes:
    color_type = 0 if img.channels == 1 else 2
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, 8, color_type, 0, 0, 0)
    rows = img.to_uint8().reshape(img.height, img.width * img.channels)
    # filter type 0 on every scanline
    raw = np.concatenate([np.zeros((img.height, 1), np.uint8), rows], axis=1).tobytes()
    return (
        PNG_SIGNATURE
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(raw, level))
        + _png_chunk(b"IEND", b"")
    )


def _paeth_row(line: bytearray, prev: bytes, bpp: int) -> None:
    for i in range(len(line)):
        a = line[i - bpp] if i >= bpp else 0
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
        line[i] = (line[i] + pred) & 0xFF


def _unfilter(data: bytes, height: int, stride: int, bpp: int) -> np.ndarray:
    if len(data) < height * (stride + 1):
        raise ImageFormatError(
            f"PNG image data truncated: expected {height * (stride + 1)} bytes, got {len(data)}"
        )
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        base = y * (stride + 1)
        ftype = data[base]
        line = np.frombuffer(data, np.uint8, stride, base + 1)
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:
            # Sub: running sum per byte lane, modulo 256
            lanes = np.zeros(-(-stride // bpp) * bpp, dtype=np.uint64)
            lanes[:stride] = line
            cur = (np.cumsum(lanes.reshape(-1, bpp), axis=0) & 0xFF).astype(np.uint8).ravel()[:stride]
        elif ftype == 2:
            cur = line + prev
        elif ftype == 3:
            buf = bytearray(line.tobytes())
            for i in range(stride):
                a = buf[i - bpp] if i >= bpp else 0
                buf[i] = (buf[i] + ((a + int(prev[i])) >> 1)) & 0xFF
            cur = np.frombuffer(bytes(buf), np.uint8)
        elif ftype == 4:
            buf = bytearray(line.tobytes())
            _paeth_row(buf, prev.tobytes(), bpp)
            cur = np.frombuffer(bytes(buf), np.uint8)
        else:
            raise ImageFormatError(f"PNG filter type {ftype} on row {y} is invalid")
        out[y] = cur
        prev = out[y]
    return out


def _check_ihdr(header) -> None:
    width, height, depth, color_type, compression, filt, interlace = header
    if width < 1 or height < 1:
        raise ImageFormatError(f"PNG IHDR width/height must be positive, got {width}x{height}")
    if depth != 8:
        raise ImageFormatError(f"PNG bit depth {depth} unsupported (IHDR bit_depth must be 8)")
    if color_type not in (0, 2):
        raise ImageFormatError(f"PNG color type {color_type} unsupported (IHDR color_type must be 0 or 2)")
    if compression != 0 or filt != 0:
        raise ImageFormatError("PNG IHDR compression/filter method must be 0")
    if interlace != 0:
        raise ImageFormatError("PNG interlace method 1 unsupported (IHDR interlace must be 0)")


def decode_png(raw: bytes) -> ImageBuffer:
    if raw[:8] != PNG_SIGNATURE:
        raise ImageFormatError("bad PNG signature")
    pos = 8
    header = None
    idat = []
    while True:
        if pos + 8 > len(raw):
            raise ImageFormatError("PNG truncated before IEND")
        (length,) = struct.unpack(">I", raw[pos : pos + 4])
        kind = raw[pos + 4 : pos + 8]
        payload = raw[pos + 8 : pos + 8 + length]
        crc_bytes = raw[pos + 8 + length : pos + 12 + length]
        if len(payload) < length or len(crc_bytes) < 4:
            raise ImageFormatError(f"PNG chunk {kind!r} truncated")
        if struct.unpack(">I", crc_bytes)[0] != zlib.crc32(payload, zlib.crc32(kind)) & 0xFFFFFFFF:
            raise ImageFormatError(f"PNG chunk {kind!r} CRC mismatch")
        pos += 12 + length
        if kind == b"IHDR":
            if length != 13:
                raise ImageFormatError(f"PNG IHDR length {length}, expected 13")
            header = struct.unpack(">IIBBBBB", payload)
            _check_ihdr(header)
        elif kind == b"IDAT":
            idat.append(payload)
        elif kind == b"IEND":
            break
        elif kind == b"PLTE":
            raise ImageFormatError("PNG color type 3 (palette) is unsupported")
    if header is None:
        raise ImageFormatError("PNG missing IHDR")
    width, height, depth, color_type, compression, filt, interlace = header
    channels = 1 if color_type == 0 else 3
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"PNG IDAT stream corrupt: {exc}") from None
    rows = _unfilter(data, height, width * channels, channels)
    return ImageBuffer.from_uint8(rows.reshape(height, width, channels))


# ---------------------------------------------------------------------------
# file boundary


def load_image(path) -> ImageBuffer:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc.strerror or exc}") from exc
    if raw[:8] == PNG_SIGNATURE:
        return decode_png(raw)
    if raw[:1] == b"P":
        return decode_pnm(raw)
    raise ImageFormatError(f"{path}: unrecognized image format (expected PGM P5, PPM P6 or PNG)")


def save_image(img: ImageBuffer, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        payload = encode_png(img)
    elif suffix in (".pgm", ".ppm", ".pnm"):
        if suffix == ".pgm" and img.channels != 1:
            img = to_grayscale(img)
        if suffix == ".ppm" and img.channels != 3:
            img = ImageBuffer(np.repeat(img.data, 3, axis=2))
        payload = encode_pnm(img)
    else:
        raise ImageFormatError(f"cannot infer output format from suffix {suffix!r}")
    path.write_bytes(payload)


# ---------------------------------------------------------------------------
# resampling and color


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centers: dst pixel k samples src coordinate (k + .5) * n_in / n_out - .5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return img
    x0, x1, fx = _bilinear_axis(img.width, out_w)
    y0, y1, fy = _bilinear_axis(img.height, out_h)
    d = img.data
    fx = fx[None, :, None]
    # lerp form a + (b - a) * f keeps constant regions exact
    r0, r1 = d[y0], d[y1]
    top = r0[:, x0] + (r0[:, x1] - r0[:, x0]) * fx
    bot = r1[:, x0] + (r1[:, x1] - r1[:, x0]) * fx
    return ImageBuffer(top + (bot - top) * fy[:, None, None])


def downscale_area(img: ImageBuffer, factor: int) -> ImageBuffer:
    """Integer-factor box downscale, modelling a sensor that integrates over pixel area."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return img
    h, w = img.height // factor, img.width // factor
    if h < 1 or w < 1:
        raise ValueError(f"image {img.width}x{img.height} too small for factor {factor}")
    d = img.data[: h * factor, : w * factor]
    return ImageBuffer(d.reshape(h, factor, w, factor, img.channels).mean(axis=(1, 3)))


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    if img.channels == 1:
        return img
    return ImageBuffer(img.data @ LUMA)


def apply_channel_transform(img: ImageBuffer, gains=(1.0, 1.0, 1.0), mode: str = "gain",
                            channel: int | None = None) -> ImageBuffer:
    """Simulate a white-balance difference.

    mode="gain" scales each channel by `gains` and clamps; mode="separate"
    replicates `channel` into all three channels.
    """
    if img.channels != 3:
        raise ValueError(f"channel transform needs a 3-channel image, got {img.channels}")
    if mode == "gain":
        g = np.asarray(gains, dtype=np.float64)
        if g.shape != (3,) or np.any(g <= 0):
            raise ValueError(f"gains must be three positive numbers, got {gains!r}")
        return ImageBuffer(np.clip(img.data * g, 0.0, 1.0))
    if mode == "separate":
        if channel not in (0, 1, 2):
            raise ValueError(f"separate channel must be 0, 1 or 2, got {channel!r}")
        return ImageBuffer(np.repeat(img.data[:, :, channel : channel + 1], 3, axis=2))
    raise ValueError(f"unknown channel transform mode {mode!r}")
