"""Line-fitting pose model: a middle-line polynomial plus L boundary segments.

A text line is described by a polynomial ``y = a0 + a1 x + ... + aK x^K``
running through its vertical middle, and L short segments
``y = b1 x + b0`` crossing it. Each segment carries two control points at
distance ``r`` on either side of the crossing. The 2L control points are
what the thin-plate spline maps the fixed base points onto.

Point ordering follows the base-point layout: slots ``0..L-1`` hold the
row at y = +0.5 (the bottom raster row, since y grows downward) and slots
``L..2L-1`` the row at y = -0.5, both ordered left to right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ROOT_TOL = 1e-12
_SCAN_SAMPLES = 2001


@dataclass(frozen=True)
class FitLineParams:
    """Middle-line coefficients ``a0..aK`` and segment triples ``(b1, b0, r)``."""

    poly: tuple[float, ...]
    segments: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        poly = tuple(float(a) for a in self.poly)
        segs = tuple(tuple(float(v) for v in s) for s in self.segments)
        if len(poly) < 2:
            raise ValueError("middle line needs order K >= 1 (at least 2 coefficients)")
        if len(segs) < 2:
            raise ValueError("need at least L = 2 segments")
        for i, s in enumerate(segs):
            if len(s) != 3:
                raise ValueError(f"segment {i} must be a (b1, b0, r) triple")
            if not s[2] >= 0.0:
                raise ValueError(f"segment {i} has negative half-length {s[2]}")
        if not all(np.isfinite(poly)) or not all(np.isfinite(v) for s in segs for v in s):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "poly", poly)
        object.__setattr__(self, "segments", segs)

    @property
    def K(self) -> int:
        return len(self.poly) - 1

    @property
    def L(self) -> int:
        return len(self.segments)

    @property
    def n_params(self) -> int:
        return 3 * self.L + self.K + 1

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "L": self.L,
            "poly": list(self.poly),
            "segments": [list(s) for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitLineParams":
        params = cls(poly=tuple(d["poly"]), segments=tuple(tuple(s) for s in d["segments"]))
        if "K" in d and int(d["K"]) != params.K:
            raise ValueError(f"K={d['K']} does not match {len(params.poly)} coefficients")
        if "L" in d and int(d["L"]) != params.L:
            raise ValueError(f"L={d['L']} does not match {params.L} segments")
        return params

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FitLineParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ControlPoints:
    """2L normalized points; first L form the y=+0.5 row, last L the y=-0.5 row."""

    points: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 4 or len(pts) % 2:
            raise ValueError(f"need an even number >= 4 of points, got {len(pts)}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def L(self) -> int:
        return len(self.points) // 2

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, ControlPoints):
            return NotImplemented
        return np.array_equal(self.points, other.points)


def eval_middle_line(poly, x):
    """Horner evaluation of ``sum(a_k x^k)``; works on scalars and arrays."""
    y = np.zeros_like(np.asarray(x, dtype=np.float64)) + poly[-1]
    for a in reversed(poly[:-1]):
        y = y * x + a
    return y if np.ndim(y) else float(y)


def _poly_derivative(poly):
    return [k * a for k, a in enumerate(poly)][1:] or [0.0]


def nominal_x(l: int, L: int) -> float:
    """Nominal crossing abscissa of segment ``l`` (0-based)."""
    return -0.5 + l / (L - 1)


def segment_center(params: FitLineParams, l: int, x_nominal: float | None = None) -> tuple[float, float]:
    """Crossing of segment ``l`` (0-based) with the middle line.

    Scans [-1, 1] for sign changes of ``middle(x) - (b1 x + b0)``, bisects
    each bracket, takes the root nearest ``x_nominal`` and polishes it with
    Newton. Without any sign change (parallel or coincident lines) the
    point on the middle line at ``x_nominal`` is returned.
    """
    if x_nominal is None:
        x_nominal = nominal_x(l, params.L)
    b1, b0, _ = params.segments[l]
    coeffs = list(params.poly)
    coeffs[0] -= b0
    coeffs[1] -= b1
    dcoeffs = _poly_derivative(coeffs)

    def f(x):
        return eval_middle_line(coeffs, x)

    xs = np.linspace(-1.0, 1.0, _SCAN_SAMPLES)
    fs = f(xs)
    roots = list(xs[fs == 0.0])
    brackets = np.nonzero((fs[:-1] * fs[1:]) < 0.0)[0]
    for i in brackets:
        lo, hi, flo = xs[i], xs[i + 1], fs[i]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = f(mid)
            if fm == 0.0 or hi - lo < 1e-15:
                lo = hi = mid
                break
            if (fm < 0.0) == (flo < 0.0):
                lo, flo = mid, fm
            else:
                hi = mid
        roots.append(0.5 * (lo + hi))
    if not roots:
        return float(x_nominal), eval_middle_line(params.poly, x_nominal)

    x = min(roots, key=lambda r: abs(r - x_nominal))
    for _ in range(50):
        fx = f(x)
        if abs(fx) < ROOT_TOL:
            break
        dfx = eval_middle_line(dcoeffs, x)
        if dfx == 0.0:
            break
        x -= fx / dfx
    return float(x), eval_middle_line(params.poly, x)


def segment_direction(b1: float) -> np.ndarray:
    """Unit vector along ``y = b1 x + b0`` pointing toward larger y (down the raster)."""
    d = np.array([1.0, b1]) / np.hypot(1.0, b1)
    if d[1] < 0.0:
        d = -d
    return d


def control_points(params: FitLineParams) -> ControlPoints:
    """Endpoints ``center +/- r d`` of every segment, in base-point slot order."""
    L = params.L
    pts = np.empty((2 * L, 2))
    for l, (b1, _b0, r) in enumerate(params.segments):
        c = np.array(segment_center(params, l))
        d = segment_direction(b1)
        pts[l] = c + r * d
        pts[L + l] = c - r * d
    return ControlPoints(pts, degenerate=is_degenerate(pts))


def base_points(L: int) -> ControlPoints:
    """Fixed layout of the rectified frame: two rows of L evenly spaced points."""
    if L < 2:
        raise ValueError(f"need L >= 2 segments, got {L}")
    xs = -0.5 + np.arange(L) / (L - 1)
    pts = np.empty((2 * L, 2))
    pts[:L, 0] = xs
    pts[:L, 1] = 0.5
    pts[L:, 0] = xs
    pts[L:, 1] = -0.5
    return ControlPoints(pts)


def is_degenerate(points, tol: float = 1e-12) -> bool:
    """True when the points cannot anchor a thin-plate spline.

    That is the case when they are all collinear (the affine block loses
    rank) or two points coincide (two kernel rows become identical).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    scale = max(1.0, float(np.abs(pts).max()))
    if sv[-1] <= tol * scale * len(pts):
        return True
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return bool(d2.min() <= tol ** 2)

