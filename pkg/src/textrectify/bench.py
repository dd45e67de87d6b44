"""Seeded benchmark suites: iteration count, segment count, and resampling strategy."""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import synth
from .fitter import FitConfig, FitterProvider
from .imagebuf import mse
from .rectifier import OracleProvider, RectifyConfig, psnr_from_loss, rectify_chained, rectify_iterative

SUITES = ("iterations", "segments", "boundary")
SEGMENT_COUNTS = (5, 10, 15, 20)
CSV_FIELDS = ("suite", "config", "cases", "mean_psnr", "std_psnr", "mean_mse", "wall_s")


def thread_count() -> int:
    """Worker cap from ``ESIR_THREADS``; unset, empty or 0 means one per CPU."""
    raw = os.environ.get("ESIR_THREADS", "").strip()
    try:
        n = int(raw) if raw else 0
    except ValueError:
        raise ValueError(f"ESIR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("ESIR_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _map(fn, items):
    items = list(items)
    workers = min(thread_count(), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class BenchRow:
    suite: str
    config: str
    psnr: np.ndarray  # per case
    mse: np.ndarray
    wall_s: float

    def record(self) -> dict:
        return {
            "suite": self.suite,
            "config": self.config,
            "cases": len(self.psnr),
            "mean_psnr": float(np.mean(self.psnr)),
            "std_psnr": float(np.std(self.psnr)),
            "mean_mse": float(np.mean(self.mse)),
            "wall_s": self.wall_s,
        }


class _Timed:
    """Provider wrapper remembering when each call returned."""

    def __init__(self, inner):
        self.inner = inner
        self.t0 = time.perf_counter()
        self.marks = [0.0]

    @property
    def last_diagnostics(self):
        return getattr(self.inner, "last_diagnostics", None)

    def estimate_delta(self, rectified, state):
        out = self.inner.estimate_delta(rectified, state)
        self.marks.append(time.perf_counter() - self.t0)
        return out


def _fitter_run(case, config: RectifyConfig, fit_config: FitConfig):
    timed = _Timed(FitterProvider(case.distorted, case.template, config, fit_config))
    _, trace = rectify_iterative(case.distorted, timed, config, case.template)
    losses = np.array([e.loss for e in trace.entries])
    return losses, np.array(timed.marks)


def iterations_suite(n_cases: int = 20, seed: int = 0, max_iters: int = 5,
                     difficulties=("mild", "curved"), fit_config: FitConfig = FitConfig()) -> list[BenchRow]:
    """Fitter-driven rectification on the mild+curved suite, one row per N = 0..max_iters.

    The provider is stateless, so the state after k iterations of one run
    is the state an N=k run would reach; a single run per case yields all
    rows. Wall time for N=k is the summed time to produce the k-th state.
    """
    config = RectifyConfig(iterations=max_iters)
    specs = [(d, seed + i) for d in difficulties for i in range(n_cases)]
    runs = _map(lambda s: _fitter_run(synth.gen_case(s[1], s[0], config), config, fit_config), specs)
    losses = np.array([r[0] for r in runs])
    marks = np.array([r[1] for r in runs])
    return [BenchRow("iterations", f"N={k}", np.array([psnr_from_loss(v) for v in losses[:, k]]),
                     losses[:, k], float(marks[:, k].sum())) for k in range(max_iters + 1)]


def segments_suite(n_cases: int = 20, seed: int = 0, counts=SEGMENT_COUNTS, iterations: int = 5,
                   difficulty: str = "curved", fit_config: FitConfig = FitConfig()) -> list[BenchRow]:
    """Fitter-driven rectification of the same distorted cases with L control-point pairs.

    Cases are always generated with the default 20-segment pose; only the
    rectifier's segment count varies.
    """
    cases = _map(lambda i: synth.gen_case(seed + i, difficulty), range(n_cases))
    rows = []
    for L in counts:
        config = RectifyConfig(iterations=iterations, segments=L)
        t0 = time.perf_counter()
        losses = np.array([r[0][-1] for r in _map(lambda c: _fitter_run(c, config, fit_config), cases)])
        rows.append(BenchRow("segments", f"L={L}", np.array([psnr_from_loss(v) for v in losses]), losses,
                             time.perf_counter() - t0))
    return rows


def boundary_suite(n_cases: int = 20, seed: int = 0, iterations: int = 5,
                   difficulty: str = "severe") -> list[BenchRow]:
    """Compose-from-original vs chained resampling, both fed the ground truth in equal shares."""
    config = RectifyConfig(iterations=iterations)
    cases = _map(lambda i: synth.gen_case(seed + i, difficulty, config), range(n_cases))
    rows = []
    for name, run in (("compose", rectify_iterative), ("chained", rectify_chained)):
        t0 = time.perf_counter()

        def one(c):
            out, _ = run(c.distorted, OracleProvider(c.true_control_offsets, iterations), config)
            return mse(out, c.template)

        losses = np.array(_map(one, cases))
        rows.append(BenchRow("boundary", name, np.array([psnr_from_loss(v) for v in losses]), losses,
                             time.perf_counter() - t0))
    return rows


def run_suite(name: str, n_cases: int = 20, seed: int = 0) -> list[BenchRow]:
    if name == "iterations":
        return iterations_suite(n_cases, seed)
    if name == "segments":
        return segments_suite(n_cases, seed)
    if name == "boundary":
        return boundary_suite(n_cases, seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")


def to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.record())
    return buf.getvalue()
