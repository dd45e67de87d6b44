"""Float image container, PPM codec, bilinear resize and PSNR.

Images hold intensities in [0, 1] as float64 arrays of shape
``(height, width, channels)``. Quantization to bytes only happens when
writing files.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PpmError(ValueError):
    """Malformed or unsupported PPM/PGM payload."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable row-major raster with 1 or 3 interleaved channels."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image data must be HxW, HxWx1 or HxWx3, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_clipped(cls, data) -> "Image":
        """Build an image, clipping intensities into [0, 1] first."""
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))

    @classmethod
    def filled(cls, width: int, height: int, value: float = 1.0, channels: int = 1) -> "Image":
        return cls(np.full((height, width, channels), float(value)))

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

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def __repr__(self):
        return f"Image({self.width}x{self.height}x{self.channels})"


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized x and y of every pixel center, each shaped (height, width).

    Pixel (col c, row r) sits at ((c + 0.5)/w - 0.5, (r + 0.5)/h - 0.5);
    y grows downward with the row index.
    """
    xs = (np.arange(width) + 0.5) / width - 0.5
    ys = (np.arange(height) + 0.5) / height - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


# --- PPM -------------------------------------------------------------------

_WHITESPACE = (b" ", b"\t", b"\r", b"\n", b"\x0b", b"\x0c")


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Return (token, start, end) skipping whitespace and '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE + (b"#",):
        pos += 1
    return buf[start:pos], start, pos


def load_ppm(buf: bytes) -> Image:
    """Decode a binary P5 (gray) or P6 (RGB) file with maxval 255."""
    buf = bytes(buf)
    if len(buf) < 2:
        raise PpmError("truncated header", len(buf))
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PpmError(f"unsupported magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _read_token(buf, pos)
        if not tok:
            raise PpmError(f"missing {name}", start)
        if not re.fullmatch(rb"[0-9]+", tok):
            raise PpmError(f"malformed {name} {tok!r}", start)
        fields.append((int(tok), start))
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width < 1:
        raise PpmError("width must be positive", wpos)
    if height < 1:
        raise PpmError("height must be positive", hpos)
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}", mpos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise PpmError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PpmError(f"truncated payload: expected {need} bytes, got {len(payload)}", pos + len(payload))
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(raw.astype(np.float64) / 255.0)


def quantize(img: Image) -> np.ndarray:
    """Round-half-up quantization to uint8."""
    return np.clip(np.floor(img.data * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_ppm(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    return header + quantize(img).tobytes()


def read_image(path) -> Image:
    return load_ppm(Path(path).read_bytes())


def write_image(img: Image, path) -> None:
    Path(path).write_bytes(save_ppm(img))


# --- resampling and metrics -------------------------------------------------

def resize_bilinear(img: Image, out_w: int, out_h: int) -> Image:
    """Center-aligned bilinear resize with edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be positive, got {out_w}x{out_h}")
    h, w = img.height, img.width
    px = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1)
    py = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (px - x0)[None, :, None]
    wy = (py - y0)[:, None, None]
    d = img.data
    top = d[y0][:, x0] * (1 - wx) + d[y0][:, x1] * wx
    bot = d[y1][:, x0] * (1 - wx) + d[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return Image(np.clip(out, d.min(), d.max()))


def mse(a: Image, b: Image) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.data - b.data) ** 2))


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio for unit-range images; inf when identical."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)
