"""Grid-driven bilinear sampling with analytic derivatives w.r.t. the grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagebuf import Image, pixel_centers

# Cell choice at exact integer pixel coordinates uses this forward nudge.
_NUDGE = 1e-12
# Pixel coordinates this close to an integer are snapped onto it, so that
# pixel centers survive the trip through normalized coordinates exactly.
_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class Grid:
    """Per-output-pixel source coordinates (normalized), shape (height, width, 2)."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 2:
            raise ValueError(f"grid coords must be (h, w, 2), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @classmethod
    def identity(cls, width: int, height: int) -> "Grid":
        gx, gy = pixel_centers(width, height)
        return cls(np.stack([gx, gy], axis=-1))


def _snap(p):
    r = np.rint(p)
    return np.where(np.abs(p - r) <= _SNAP, r, p)


def _taps(src: Image, grid: Grid, pad: float):
    h, w = src.height, src.width
    gx = grid.coords[..., 0]
    gy = grid.coords[..., 1]
    # Far-away and non-finite coordinates only ever touch padding.
    px = np.clip(np.nan_to_num((gx + 0.5) * w - 0.5, nan=-2.0), -2.0, w + 1.0)
    py = np.clip(np.nan_to_num((gy + 0.5) * h - 0.5, nan=-2.0), -2.0, h + 1.0)
    px = _snap(px)
    py = _snap(py)
    x0 = np.floor(px + _NUDGE)
    y0 = np.floor(py + _NUDGE)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)

    padded = np.full((h + 2, w + 2, src.channels), float(pad))
    padded[1:-1, 1:-1] = src.data
    xa = np.clip(x0, -1, w) + 1
    xb = np.clip(x0 + 1, -1, w) + 1
    ya = np.clip(y0, -1, h) + 1
    yb = np.clip(y0 + 1, -1, h) + 1
    return (padded[ya, xa], padded[ya, xb], padded[yb, xa], padded[yb, xb]), fx, fy


def sample(src: Image, grid: Grid, pad: float = 0.0) -> Image:
    """Bilinear lookup of ``src`` at every grid coordinate.

    Taps falling outside the raster read ``pad``. The output has the
    grid's size and the source's channel count.
    """
    (i00, i01, i10, i11), fx, fy = _taps(src, grid, pad)
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    out = top + fy * (bot - top)
    return Image(np.clip(out, 0.0, 1.0))


def sample_with_jacobian(src: Image, grid: Grid, pad: float = 0.0):
    """Sample plus the partials of every output value w.r.t. its grid x and y.

    Derivatives are in normalized units (one pixel is ``1/width`` wide), so
    they carry a factor of the source width or height. Within a source cell
    they are constant in the matching direction; on a cell boundary the cell
    to the lower-right is used.

    Returns ``(image, d_dx, d_dy)`` with both arrays shaped like
    ``image.data``.
    """
    (i00, i01, i10, i11), fx, fy = _taps(src, grid, pad)
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    out = top + fy * (bot - top)
    d_dpx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    d_dpy = bot - top
    return Image(np.clip(out, 0.0, 1.0)), d_dpx * src.width, d_dpy * src.height


def boundary_distance(src_w: int, src_h: int, grid: Grid) -> np.ndarray:
    """Distance (in pixels) from each grid tap position to the nearest cell edge.

    The minimum over both axes; small values flag points where the
    piecewise-bilinear sampler has a kink.
    """
    px = (grid.coords[..., 0] + 0.5) * src_w - 0.5
    py = (grid.coords[..., 1] + 0.5) * src_h - 0.5
    dx = np.abs(px - np.round(px))
    dy = np.abs(py - np.round(py))
    return np.minimum(dx, dy)


def oob_fraction(grid: Grid) -> float:
    """Share of grid points lying outside the source image area."""
    c = grid.coords
    outside = (np.abs(c[..., 0]) > 0.5) | (np.abs(c[..., 1]) > 0.5) | ~np.isfinite(c).all(-1)
    return float(outside.mean())
