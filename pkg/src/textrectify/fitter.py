"""Gradient-based estimation of control-point offsets against a template.

The objective is the mean squared intensity error between the rectified
image and a fronto-parallel template. Its gradient is assembled by the
chain rule: residuals times the sampler's partials give a per-pixel
gradient on the sampling grid, and since the grid is a fixed linear image
of the control points (``grid = W @ P``, see :func:`tps.grid_operator`),
the offset gradient is ``W.T`` applied to it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import tps
from .imagebuf import Image
from .rectifier import ParamState, RectifyConfig, clamp_increment, init_state
from .sampler import Grid, boundary_distance, sample, sample_with_jacobian

GRAD_MODES = ("analytic", "fd")


class FitDivergedError(ArithmeticError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class FitConfig:
    max_steps: int = 50
    step_size: float = 0.05
    backtrack: float = 0.5
    max_halvings: int = 8
    grad_mode: str = "analytic"
    fd_step: float = 1e-5
    rel_tol: float = 1e-6
    precondition: bool = True

    def __post_init__(self):
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.max_steps < 0 or self.max_halvings < 0:
            raise ValueError("step counts must be non-negative")
        if not (self.step_size > 0 and self.fd_step > 0 and self.rel_tol > 0):
            raise ValueError("step sizes and tolerance must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.fd_step >= self.step_size:
            raise ValueError("finite-difference step must be much smaller than the step size")


class Objective:
    """Template MSE as a function of the (2L, 2) offset array.

    ``mask`` restricts the sum to selected output pixels while keeping the
    normalization by the full pixel count.
    """

    def __init__(self, original: Image, template: Image, config: RectifyConfig, mask=None):
        if (template.width, template.height) != (config.out_w, config.out_h):
            raise ValueError(f"template is {template.width}x{template.height}, "
                             f"expected {config.out_w}x{config.out_h}")
        if template.channels != original.channels:
            raise ValueError("template and original channel counts differ")
        self.original = original
        self.template = template.data
        self.config = config
        self.base = init_state(config.segments).base
        self.op = tps.grid_operator(self.base, config.out_w, config.out_h, config.lam)
        self.count = template.data.size
        self.mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(config.out_h, config.out_w, 1)

    def grid(self, delta) -> Grid:
        pts = self.base + np.asarray(delta, dtype=np.float64).reshape(-1, 2)
        return Grid((self.op @ pts).reshape(self.config.out_h, self.config.out_w, 2))

    def _residual(self, out):
        r = out - self.template
        return r if self.mask is None else r * self.mask

    def value(self, delta) -> float:
        out = sample(self.original, self.grid(delta), 0.0).data
        r = self._residual(out)
        return float(np.sum(r * r) / self.count)

    def value_and_grad(self, delta) -> tuple[float, np.ndarray]:
        out, d_dx, d_dy = sample_with_jacobian(self.original, self.grid(delta), 0.0)
        r = self._residual(out.data)
        scale = 2.0 / self.count
        gx = (scale * np.sum(r * d_dx, axis=2)).ravel()
        gy = (scale * np.sum(r * d_dy, axis=2)).ravel()
        grad = np.stack([self.op.T @ gx, self.op.T @ gy], axis=1)
        return float(np.sum(r * r) / self.count), grad

    def fd_grad(self, delta, h: float = 1e-5) -> np.ndarray:
        """Central differences over every offset component."""
        x = np.asarray(delta, dtype=np.float64).reshape(-1, 2)
        grad = np.empty_like(x)
        for idx in np.ndindex(*x.shape):
            xp = x.copy()
            xp[idx] += h
            xm = x.copy()
            xm[idx] -= h
            grad[idx] = (self.value(xp) - self.value(xm)) / (2.0 * h)
        return grad


def loss(original: Image, state: ParamState, template: Image, config: RectifyConfig = RectifyConfig()) -> float:
    """Mean squared error between the rectified original and the template."""
    return Objective(original, template, config).value(state.delta)


def grad_loss(original: Image, state: ParamState, template: Image, config: RectifyConfig = RectifyConfig(),
              mode: str = "analytic", h: float = 1e-5) -> np.ndarray:
    """Gradient of :func:`loss` w.r.t. the offsets, shaped (2L, 2)."""
    obj = Objective(original, template, config)
    if mode == "analytic":
        return obj.value_and_grad(state.delta)[1]
    if mode == "fd":
        return obj.fd_grad(state.delta, h)
    raise ValueError(f"unknown gradient mode {mode!r}")


@dataclass
class FitTrace:
    losses: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"step": k, "loss": f, "step_size": a})
            + "\n" for k, (f, a) in enumerate(zip(self.losses, self.step_sizes))
        )


def fit(original: Image, template: Image, config: RectifyConfig = RectifyConfig(),
        fit_config: FitConfig = FitConfig(), init: ParamState | None = None) -> tuple[ParamState, FitTrace]:
    """Backtracking descent on the template MSE, starting from ``init`` (zero offsets by default).

    The descent direction is the gradient measured in the grid metric,
    ``-(W.T W)^-1 g``: a control-point move is judged by how far it moves the
    sampling grid, which keeps closely spaced control points from crawling.
    Trial step lengths come from the Barzilai-Borwein rule in the same
    metric and are capped so no offset moves more than ``step_size`` per
    step. A step is accepted only if it lowers the loss; otherwise its
    length is multiplied by ``backtrack``, at most ``max_halvings`` times,
    after which the search stops.

    The trace holds the starting loss followed by the loss after every
    accepted step, so it never increases. Returns the final (and best) state.
    """
    state = init if init is not None else init_state(config.segments)
    obj = Objective(original, template, config)
    x = np.array(state.delta, dtype=np.float64)
    metric = obj.op.T @ obj.op if fit_config.precondition else np.eye(len(x))
    chol = scipy.linalg.cho_factor(metric)

    def evaluate(x, step):
        if fit_config.grad_mode == "analytic":
            f, g = obj.value_and_grad(x)
        else:
            f, g = obj.value(x), obj.fd_grad(x, fit_config.fd_step)
        if not math.isfinite(f):
            raise FitDivergedError(step, "loss")
        if not np.all(np.isfinite(g)):
            raise FitDivergedError(step, "gradient")
        return f, g

    f, g = evaluate(x, 0)
    trace = FitTrace([f], [0.0])
    scale = math.inf
    for step in range(1, fit_config.max_steps + 1):
        direction = -scipy.linalg.cho_solve(chol, g)
        dmax = float(np.abs(direction).max())
        if dmax == 0.0:
            break
        scale = min(scale, fit_config.step_size / dmax)
        for _ in range(fit_config.max_halvings + 1):
            cand = x + scale * direction
            f_new = obj.value(cand)
            if not math.isfinite(f_new):
                raise FitDivergedError(step, "loss")
            if f_new < f:
                break
            scale *= fit_config.backtrack
        else:
            break
        rel = (f - f_new) / max(f, 1e-300)
        f_new, g_new = evaluate(cand, step)
        s, y = cand - x, g_new - g
        x, f, g = cand, f_new, g_new
        trace.losses.append(f)
        trace.step_sizes.append(float(np.abs(s).max()))
        if rel < fit_config.rel_tol:
            break
        curv = float(np.sum(s * y))
        scale = float(np.sum(s * (metric @ s))) / curv if curv > 0 else scale / fit_config.backtrack
    return state.with_delta(x), trace


class FitterProvider:
    """Parameter provider that runs :func:`fit` from the current state.

    Bound to the original image and the template at construction; the
    rectified view passed in by the pipeline is not needed because the
    objective re-renders it from the original.
    """

    def __init__(self, original: Image, template: Image, config: RectifyConfig = RectifyConfig(),
                 fit_config: FitConfig = FitConfig()):
        self.original = original
        self.template = template
        self.config = config
        self.fit_config = fit_config
        self.last_diagnostics: dict = {}
        self.traces: list[FitTrace] = []

    def estimate_delta(self, rectified: Image, state: ParamState) -> np.ndarray:
        fitted, trace = fit(self.original, self.template, self.config, self.fit_config, init=state)
        self.traces.append(trace)
        self.last_diagnostics = {"steps": len(trace.losses) - 1, "loss": trace.losses[-1]}
        return clamp_increment(fitted.delta - state.delta)


# --- gradient check ---------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_err: float
    cosine: float
    analytic: np.ndarray
    numeric: np.ndarray
    kept_pixels: float

    def passed(self, rel_tol: float = 1e-4, cos_tol: float = 0.999) -> bool:
        return self.max_rel_err < rel_tol and self.cosine > cos_tol


def relative_errors(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Componentwise ``|a - n| / max(|a|, |n|, floor * max|n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * max(float(np.abs(n).max()), 1e-300))
    return np.abs(a - n) / denom


def check_gradient(original: Image, state: ParamState, template: Image, config: RectifyConfig = RectifyConfig(),
                   h: float = 1e-5, scale_analytic: float = 1.0) -> GradCheck:
    """Compare analytic and central-difference gradients of the loss.

    The bilinear sampler has kinks on source cell boundaries, where a
    central difference straddling the kink is meaningless. Output pixels
    whose taps sit closer to a boundary than the largest grid displacement
    a step of ``h`` can cause are left out of the loss for both gradients.
    ``scale_analytic`` exists for fault-injection tests.
    """
    obj = Objective(original, template, config)
    grid = obj.grid(state.delta)
    reach = float(np.abs(obj.op).max()) * h * max(original.width, original.height)
    mask = boundary_distance(original.width, original.height, grid) > 4.0 * reach
    masked = Objective(original, template, config, mask=mask)
    analytic = masked.value_and_grad(state.delta)[1] * scale_analytic
    numeric = masked.fd_grad(state.delta, h)
    a, n = analytic.ravel(), numeric.ravel()
    cos = float(a @ n / (np.linalg.norm(a) * np.linalg.norm(n))) if np.any(a) and np.any(n) else float(
        np.array_equal(a, n))
    return GradCheck(float(relative_errors(a, n).max()), cos, analytic, numeric, float(mask.mean()))
