"""Iterative rectification: estimate offsets from the current view, always warp the original.

Control points are kept as ``P = P0 + dP`` with ``P0`` the base points, so
the zero offset is the identity warp. Each iteration renders the current
rectified view, asks a parameter provider for an offset increment, and adds
it to ``dP``. Sampling always reads the original image; the rectified views
are only ever fed to the provider.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import tps
from .fitline import base_points
from .imagebuf import Image, mse
from .sampler import Grid, oob_fraction, sample

MAX_INCREMENT = 0.2


@dataclass(frozen=True)
class RectifyConfig:
    iterations: int = 5
    segments: int = 20
    order: int = 4
    out_w: int = 100
    out_h: int = 32
    lam: float = 0.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.segments < 2:
            raise ValueError("need at least 2 segments")
        if self.order < 1:
            raise ValueError("polynomial order must be >= 1")
        if self.out_w < 1 or self.out_h < 1:
            raise ValueError("output size must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass(frozen=True, eq=False)
class ParamState:
    """Base points ``P0`` and the accumulated offsets ``dP``, both (2L, 2)."""

    base: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        base = np.array(getattr(self.base, "points", self.base), dtype=np.float64).reshape(-1, 2)
        delta = np.array(self.delta, dtype=np.float64).reshape(-1, 2)
        if base.shape != delta.shape:
            raise ValueError(f"base {base.shape} and delta {delta.shape} differ")
        base.setflags(write=False)
        delta.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "delta", delta)

    @property
    def L(self) -> int:
        return len(self.base) // 2

    @property
    def points(self) -> np.ndarray:
        return self.base + self.delta

    def with_delta(self, delta) -> "ParamState":
        return ParamState(self.base, delta)


def init_state(L: int) -> ParamState:
    base = base_points(L).points
    return ParamState(base, np.zeros_like(base))


def clamp_increment(inc) -> np.ndarray:
    return np.clip(np.asarray(inc, dtype=np.float64), -MAX_INCREMENT, MAX_INCREMENT)


class ParameterProvider(Protocol):
    def estimate_delta(self, rectified: Image, state: ParamState) -> np.ndarray:
        """Offset increment, shaped (2L, 2), in the original image's normalized frame."""
        ...


class ZeroProvider:
    def estimate_delta(self, rectified, state):
        return np.zeros_like(state.delta)


class OracleProvider:
    """Hands out a known total offset in equal shares over ``iterations`` calls."""

    def __init__(self, total_delta, iterations: int):
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        self.total = np.asarray(total_delta, dtype=np.float64).reshape(-1, 2)
        self.iterations = iterations

    def estimate_delta(self, rectified, state):
        return self.total / self.iterations


class ProviderError(RuntimeError):
    def __init__(self, iteration: int, trace: "RectifyTrace", cause: BaseException):
        super().__init__(f"parameter provider failed at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.trace = trace


@dataclass
class TraceEntry:
    iteration: int
    delta: np.ndarray
    loss: float | None
    oob_frac: float
    diagnostics: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "iter": self.iteration,
            "delta_norm": float(np.linalg.norm(self.delta)),
            "loss": self.loss,
            "oob_frac": self.oob_frac,
        }


@dataclass
class RectifyTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_record()) + "\n" for e in self.entries)


def rectify_grid(state: ParamState, config: RectifyConfig) -> Grid:
    """Sampling grid of the spline taking the base points onto the state's points.

    Evaluated as ``W @ P`` with the cached operator of :func:`tps.grid_operator`,
    which equals ``map_grid(solve(base, P))`` and is shared with the fitter.
    """
    op = tps.grid_operator(state.base, config.out_w, config.out_h, config.lam)
    return Grid((op @ state.points).reshape(config.out_h, config.out_w, 2))


def rectify_once(original: Image, state: ParamState, config: RectifyConfig) -> Image:
    """Warp ``original`` onto the output raster with the state's control points."""
    return sample(original, rectify_grid(state, config), 0.0)


def _record(trace, i, original, state, config, template, diagnostics=None):
    grid = rectify_grid(state, config)
    loss = None
    if template is not None:
        loss = mse(sample(original, grid, 0.0), template)
    trace.entries.append(TraceEntry(i, state.delta.copy(), loss, oob_fraction(grid), diagnostics or {}))


def _checked_increment(provider, view, state, i, trace):
    try:
        inc = np.asarray(provider.estimate_delta(view, state), dtype=np.float64)
        if inc.size != state.delta.size:
            raise ValueError(f"increment has {inc.size} values, expected {state.delta.size}")
        if not np.all(np.isfinite(inc)):
            raise ValueError("increment is not finite")
    except Exception as exc:
        raise ProviderError(i, trace, exc) from exc
    return clamp_increment(inc.reshape(state.delta.shape))


def rectify_iterative(original: Image, provider: ParameterProvider, config: RectifyConfig = RectifyConfig(),
                      template: Image | None = None) -> tuple[Image, RectifyTrace]:
    """Run ``config.iterations`` estimate/accumulate rounds and warp the original.

    ``template``, when given, is only used to log the reconstruction loss of
    each state in the trace.
    """
    state = init_state(config.segments)
    trace = RectifyTrace()
    _record(trace, 0, original, state, config, template)
    for i in range(1, config.iterations + 1):
        view = rectify_once(original, state, config)
        inc = _checked_increment(provider, view, state, i, trace)
        state = state.with_delta(state.delta + inc)
        _record(trace, i, original, state, config, template, getattr(provider, "last_diagnostics", None))
    return rectify_once(original, state, config), trace


def rectify_chained(original: Image, provider: ParameterProvider, config: RectifyConfig = RectifyConfig(),
                    template: Image | None = None) -> tuple[Image, RectifyTrace]:
    """Naive variant that re-warps the previous output instead of the original.

    The provider sees the same states as in :func:`rectify_iterative`, but
    every increment is applied by resampling the last intermediate image,
    so interpolation blur and cropped borders pile up. Kept as the
    comparison baseline for the compose-from-original design.
    """
    state = init_state(config.segments)
    zero = init_state(config.segments)
    trace = RectifyTrace()
    current = rectify_once(original, zero, config)
    trace.entries.append(TraceEntry(0, state.delta.copy(),
                                    mse(current, template) if template is not None else None,
                                    oob_fraction(rectify_grid(zero, config))))
    src = original
    for i in range(1, config.iterations + 1):
        inc = _checked_increment(provider, current, state, i, trace)
        state = state.with_delta(state.delta + inc)
        grid = rectify_grid(zero.with_delta(inc), config)
        current = sample(src, grid, 0.0)
        src = current
        loss = mse(current, template) if template is not None else None
        trace.entries.append(TraceEntry(i, state.delta.copy(), loss, oob_fraction(grid)))
    return current, trace


def psnr_from_loss(loss: float) -> float:
    return math.inf if loss == 0 else 10.0 * math.log10(1.0 / loss)
