"""Synthetic text-like templates and known distortions for testing.

Templates are drawn from axis-aligned bars and boxes on a white canvas and
softened with a small Gaussian, standing in for optical blur. A distortion
is a :class:`FitLineParams` pose. The distorted image is made by inverting
the rectifying spline: the same machinery run backwards (control points as
sources, base points as targets) gives a first guess for every source
pixel, which Newton iterations on the forward spline then make exact, so
the ground-truth offsets undo the distortion up to sampler blur.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage

from . import tps
from .fitline import FitLineParams, base_points, control_points, eval_middle_line
from .imagebuf import Image, pixel_centers, psnr, read_image, save_ppm, write_image
from .rectifier import ParamState, RectifyConfig, rectify_once
from .sampler import Grid, sample

DIFFICULTIES = ("mild", "perspective", "curved", "severe")
SRC_W, SRC_H = 200, 64
MIN_ROUNDTRIP_PSNR = 25.0
MAX_ATTEMPTS = 10
# Gaussian edge blur of generated templates, in template pixels.
EDGE_SIGMA = 1.5


@dataclass(frozen=True)
class Bar:
    """Filled rectangle; spans the full canvas height unless ``y``/``h`` are given."""

    x: int
    w: int
    intensity: float = 0.0
    y: int = 0
    h: int | None = None


@dataclass(frozen=True)
class Box:
    """Rectangle outline with the given stroke width."""

    x: int
    y: int
    w: int
    h: int
    intensity: float = 0.0
    stroke: int = 1


def render_template(glyphs, w: int, h: int) -> Image:
    canvas = np.ones((h, w))
    for g in glyphs:
        gh = h - g.y if isinstance(g, Bar) and g.h is None else g.h
        if g.x < 0 or g.y < 0 or g.w < 1 or gh < 1 or g.x + g.w > w or g.y + gh > h:
            raise ValueError(f"primitive {g} does not fit a {w}x{h} canvas")
        if not 0.0 <= g.intensity <= 1.0:
            raise ValueError(f"primitive {g} has intensity outside [0, 1]")
        if isinstance(g, Box):
            s = g.stroke
            if s < 1:
                raise ValueError(f"box stroke must be >= 1, got {s}")
            region = np.zeros((gh, g.w), dtype=bool)
            region[:s, :] = region[-s:, :] = True
            region[:, :s] = region[:, -s:] = True
            canvas[g.y:g.y + gh, g.x:g.x + g.w][region] = g.intensity
        else:
            canvas[g.y:g.y + gh, g.x:g.x + g.w] = g.intensity
    return Image(canvas)


def soften(img: Image, sigma: float = EDGE_SIGMA) -> Image:
    """Gaussian blur with edge replication; ``sigma`` in pixels, 0 is a no-op."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    return Image.from_clipped(scipy.ndimage.gaussian_filter(img.data, sigma=(sigma, sigma, 0), mode="nearest"))


_SHAPES = ("I", "O", "E", "H", "L", "T", "U", "C")


def banner_glyphs(rng: np.random.Generator, w: int = 100, h: int = 32) -> list:
    """A row of blocky letter-like glyphs across the middle band of the canvas."""
    top = int(round(0.2 * h))
    bottom = int(round(0.8 * h))
    gh = bottom - top
    s = max(2, int(round(0.1 * h)))
    glyphs = []
    x = int(rng.integers(3, 7))
    while True:
        gw = int(rng.integers(7, 12))
        if x + gw > w - 3:
            break
        ink = float(rng.uniform(0.35, 0.6))
        shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
        if shape == "I":
            cx = x + (gw - s) // 2
            glyphs.append(Bar(cx, s, ink, top, gh))
        elif shape == "O":
            glyphs.append(Box(x, top, gw, gh, ink, s))
        elif shape in ("E", "C"):
            glyphs.append(Bar(x, s, ink, top, gh))
            glyphs.append(Bar(x, gw, ink, top, s))
            glyphs.append(Bar(x, gw, ink, bottom - s, s))
            if shape == "E":
                glyphs.append(Bar(x, gw - 2, ink, top + (gh - s) // 2, s))
        elif shape == "H":
            glyphs.append(Bar(x, s, ink, top, gh))
            glyphs.append(Bar(x + gw - s, s, ink, top, gh))
            glyphs.append(Bar(x, gw, ink, top + (gh - s) // 2, s))
        elif shape == "L":
            glyphs.append(Bar(x, s, ink, top, gh))
            glyphs.append(Bar(x, gw, ink, bottom - s, s))
        elif shape == "T":
            glyphs.append(Bar(x, gw, ink, top, s))
            glyphs.append(Bar(x + (gw - s) // 2, s, ink, top, gh))
        else:  # U
            glyphs.append(Bar(x, s, ink, top, gh))
            glyphs.append(Bar(x + gw - s, s, ink, top, gh))
            glyphs.append(Bar(x, gw, ink, bottom - s, s))
        x += gw + int(rng.integers(2, 5))
    return glyphs


def image_checksum(img: Image) -> str:
    return hashlib.sha256(save_ppm(img)).hexdigest()


# --- forward distortion -----------------------------------------------------

def warp_with_control_points(template: Image, points, src_w: int = SRC_W, src_h: int = SRC_H,
                             lam: float = 0.0) -> Image:
    """Render the distorted view in which ``template`` lands on ``points``.

    The spline fitted from ``points`` back onto the base points gives a
    first estimate of where each source pixel comes from. That estimate is
    only exact at the control points, so it is polished by Newton steps
    until the rectifying spline (base points onto ``points``) maps it back
    onto the source pixel. Rectifying the result with the same points then
    reproduces the template up to interpolation blur.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 2)
    base = base_points(len(pts) // 2).points
    backward = tps.solve(pts, base, lam)
    forward = tps.solve(base, pts, lam)
    gx, gy = pixel_centers(src_w, src_h)
    lattice = np.stack([gx.ravel(), gy.ravel()], axis=1)
    guess = tps.map_points(backward, lattice)
    exact, _ = tps.invert_points(forward, lattice, initial=guess)
    return sample(template, Grid(exact.reshape(src_h, src_w, 2)), pad=1.0)


def warp_with_params(template: Image, params: FitLineParams, src_w: int = SRC_W, src_h: int = SRC_H,
                     lam: float = 0.0) -> Image:
    cp = control_points(params)
    if cp.degenerate:
        raise tps.TpsSingularError("degenerate control points", float("inf"))
    return warp_with_control_points(template, cp, src_w, src_h, lam)


# --- case generation --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SynthCase:
    template: Image
    distorted: Image
    true_params: FitLineParams
    true_control_offsets: np.ndarray
    seed: int
    difficulty: str

    @property
    def L(self) -> int:
        return self.true_params.L

    def true_state(self) -> ParamState:
        base = base_points(self.L).points
        return ParamState(base, self.true_control_offsets)


def _tilt_to_slope(theta: float) -> float:
    """Slope b1 of a segment leaning ``theta`` radians away from vertical."""
    if abs(theta) < 1e-4:
        theta = 1e-4 if theta >= 0 else -1e-4
    return float(np.cos(theta) / np.sin(theta))


def sample_params(rng: np.random.Generator, difficulty: str, L: int = 20, K: int = 4,
                  src_w: int = SRC_W, src_h: int = SRC_H) -> FitLineParams:
    """Draw a random pose of the requested difficulty that stays inside the source canvas."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}; choose from {DIFFICULTIES}")
    curved = difficulty in ("curved", "severe")
    persp = difficulty in ("perspective", "severe")

    poly = np.zeros(K + 1)
    if difficulty == "mild":
        poly[1] = rng.uniform(-0.05, 0.05)
        poly[2] = rng.uniform(-0.1, 0.1)
    if persp:
        poly[1] = rng.uniform(-0.15, 0.15)
    if curved:
        poly[2] = rng.uniform(-0.4, 0.4)
        if K >= 3:
            poly[3] = rng.uniform(-0.2, 0.2)
        if K >= 4:
            poly[4] = rng.uniform(-0.2, 0.2)
    elif persp:
        poly[2] = rng.uniform(-0.05, 0.05)

    u = -0.5 + np.arange(L) / (L - 1)
    span = rng.uniform(0.86, 0.95) if difficulty == "mild" else rng.uniform(0.8, 0.92)
    if persp:
        k = rng.uniform(-0.4, 0.4)
        warped = u * (1 + 0.5 * abs(k)) / (1 + k * u)
        shape = warped / np.abs(warped).max() * 0.5
    else:
        shape = u
    shift = rng.uniform(-0.02, 0.02)
    a0_jitter = rng.uniform(-0.02, 0.02)
    if difficulty == "mild":
        follow, lean, lean_l = 1.0, rng.uniform(-0.05, 0.05), np.zeros(L)
    elif persp:
        follow, lean, lean_l = rng.uniform(0.0, 1.0), rng.uniform(-0.3, 0.3), rng.uniform(-0.03, 0.03, size=L)
    else:
        follow, lean, lean_l = 1.0, 0.0, rng.uniform(-0.05, 0.05, size=L)
    r_frac = rng.uniform(0.0, 1.0, size=2 if persp else 1)
    r_jitter = rng.uniform(-0.01, 0.01, size=L)
    lo = 0.35 if difficulty == "mild" else 0.2
    # Keep two source pixels of margin on every side.
    x_room = 0.5 - 2.0 / src_w
    y_room = 0.5 - 2.0 / src_h

    for _ in range(6):
        xs = span * shape + shift
        poly[0] = 0.0
        mid = eval_middle_line(poly, xs)
        poly[0] = -0.5 * (mid.max() + mid.min()) + a0_jitter
        mid = eval_middle_line(poly, xs)
        slope = eval_middle_line([i * a for i, a in enumerate(poly)][1:], xs)
        tilt = np.arctan(-slope) * follow + lean + lean_l

        r_cap = (y_room - np.abs(mid)) / np.maximum(np.cos(tilt), 1e-3)
        r_hi = min(0.45, float(r_cap.min()))
        if r_hi < lo:
            raise _Reject("no vertical room for the text band")
        r_pick = lo + r_frac * (r_hi - lo)
        r = r_pick[0] + (r_pick[-1] - r_pick[0]) * (u + 0.5)
        r = np.clip(r + r_jitter, lo, r_hi)

        extent = float(np.max(np.abs(xs) + r * np.abs(np.sin(tilt))))
        if extent <= x_room:
            break
        span *= 0.99 * x_room / extent
        shift *= 0.99 * x_room / extent
    else:
        raise _Reject("segments do not fit horizontally")

    segs = []
    for l in range(L):
        b1 = _tilt_to_slope(float(tilt[l]))
        b0 = float(mid[l] - b1 * xs[l])
        segs.append((b1, b0, float(r[l])))
    return FitLineParams(poly=tuple(poly), segments=tuple(segs))


class _Reject(Exception):
    pass


def _inside(points, src_w, src_h) -> bool:
    mx = 0.5 - 2.0 / src_w
    my = 0.5 - 2.0 / src_h
    return bool(np.all(np.abs(points[:, 0]) <= mx) and np.all(np.abs(points[:, 1]) <= my))


def gen_case(seed: int, difficulty: str = "mild", config: RectifyConfig = RectifyConfig(),
             src_w: int = SRC_W, src_h: int = SRC_H) -> SynthCase:
    """Deterministic synthetic case; resamples until the ground truth round-trips.

    A case is accepted when rectifying the distorted image with the true
    offsets reproduces the template at ``MIN_ROUNDTRIP_PSNR`` or better.
    """
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}; choose from {DIFFICULTIES}")
    rng = np.random.default_rng([int(seed), DIFFICULTIES.index(difficulty)])
    L = config.segments
    base = base_points(L).points
    for _ in range(MAX_ATTEMPTS):
        glyphs = banner_glyphs(rng, config.out_w, config.out_h)
        template = soften(render_template(glyphs, config.out_w, config.out_h))
        try:
            params = sample_params(rng, difficulty, L, config.order, src_w, src_h)
        except _Reject:
            continue
        cp = control_points(params)
        if cp.degenerate or not _inside(cp.points, src_w, src_h):
            continue
        distorted = warp_with_control_points(template, cp.points, src_w, src_h, config.lam)
        offsets = cp.points - base
        rect = rectify_once(distorted, ParamState(base, offsets), config)
        if psnr(rect, template) >= MIN_ROUNDTRIP_PSNR:
            offsets.setflags(write=False)
            return SynthCase(template, distorted, params, offsets, int(seed), difficulty)
    raise RuntimeError(f"could not generate a valid {difficulty} case for seed {seed} "
                       f"in {MAX_ATTEMPTS} attempts")


def gen_suite(difficulty: str, n: int, seed0: int = 0, config: RectifyConfig = RectifyConfig()) -> list[SynthCase]:
    return [gen_case(seed0 + i, difficulty, config) for i in range(n)]


def write_case(case: SynthCase, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_image(case.template, d / "template.ppm")
    write_image(case.distorted, d / "distorted.ppm")
    (d / "params.json").write_text(json.dumps({"space": "fitline", **case.true_params.to_dict()}) + "\n")
    meta = {
        "seed": case.seed,
        "difficulty": case.difficulty,
        "L": case.L,
        "delta": case.true_control_offsets.tolist(),
    }
    (d / "meta.json").write_text(json.dumps(meta) + "\n")
    return d


def read_case(directory) -> SynthCase:
    d = Path(directory)
    params = FitLineParams.from_dict(json.loads((d / "params.json").read_text()))
    meta = json.loads((d / "meta.json").read_text())
    return SynthCase(
        template=read_image(d / "template.ppm"),
        distorted=read_image(d / "distorted.ppm"),
        true_params=params,
        true_control_offsets=np.asarray(meta["delta"], dtype=np.float64),
        seed=int(meta["seed"]),
        difficulty=meta["difficulty"],
    )
