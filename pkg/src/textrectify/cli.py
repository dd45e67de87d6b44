"""Command-line entry point: ``textrectify <command> ...``.

Exit codes: 0 success, 1 check failure, 2 I/O or argument error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, synth
from .fitline import FitLineParams, base_points, control_points, eval_middle_line
from .fitter import GRAD_MODES, FitConfig, FitDivergedError, FitterProvider, check_gradient
from .imagebuf import Image, PpmError, psnr, read_image, save_ppm
from .rectifier import (OracleProvider, ParamState, ProviderError, RectifyConfig, ZeroProvider, init_state,
                        rectify_iterative)
from .synth import warp_with_control_points, warp_with_params
from .tps import TpsSingularError

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


# --- parameter files --------------------------------------------------------

def load_params(text: str):
    """Parse a params file into ``FitLineParams`` or a ``ParamState``."""
    d = json.loads(text)
    if not isinstance(d, dict):
        raise ValueError("params file must hold a JSON object")
    space = d.get("space")
    if space == "fitline":
        return FitLineParams.from_dict(d)
    if space == "control":
        L = int(d["L"])
        delta = np.asarray(d["delta"], dtype=np.float64)
        if delta.shape != (2 * L, 2):
            raise ValueError(f"delta must hold 2L={2 * L} pairs, got shape {delta.shape}")
        return ParamState(base_points(L).points, delta)
    raise ValueError(f"params 'space' must be 'fitline' or 'control', got {space!r}")


def dump_params(params) -> str:
    if isinstance(params, FitLineParams):
        return json.dumps({"space": "fitline", **params.to_dict()})
    return json.dumps({"space": "control", "L": params.L, "delta": params.delta.tolist()})


def as_state(params) -> ParamState:
    if isinstance(params, ParamState):
        return params
    cp = control_points(params)
    base = base_points(params.L).points
    return ParamState(base, cp.points - base)


# --- I/O helpers ------------------------------------------------------------

def _read_image(path) -> Image:
    try:
        return read_image(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except PpmError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _read_params(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return load_params(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read {path}: invalid params ({exc})") from exc


def _write(path, data):
    try:
        if isinstance(data, str):
            Path(path).write_text(data)
        else:
            Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return w, h


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


# --- commands ---------------------------------------------------------------

def cmd_warp(args) -> int:
    template = _read_image(args.template)
    params = _read_params(args.params)
    w, h = args.src_size
    if isinstance(params, FitLineParams):
        out = warp_with_params(template, params, w, h)
    else:
        out = warp_with_control_points(template, params.points, w, h)
    _write(args.out, save_ppm(out))
    return EXIT_OK


def cmd_rectify(args) -> int:
    original = _read_image(args.input)
    state = as_state(_read_params(args.params))
    config = RectifyConfig(iterations=args.iters, segments=state.L)
    provider = OracleProvider(state.delta, args.iters) if args.iters > 0 else ZeroProvider()
    out, trace = rectify_iterative(original, provider, config)
    _write(args.out, save_ppm(out))
    if args.trace:
        _write(args.trace, trace.to_jsonl())
    return EXIT_OK


def cmd_fit(args) -> int:
    original = _read_image(args.input)
    template = _read_image(args.template)
    config = RectifyConfig(iterations=args.iters)
    if (template.width, template.height) != (config.out_w, config.out_h):
        raise CliError(f"template must be {config.out_w}x{config.out_h}, got {template.width}x{template.height}")
    if template.channels != original.channels:
        raise CliError("input and template channel counts differ")
    provider = FitterProvider(original, template, config, FitConfig(max_steps=args.steps, grad_mode=args.grad))
    try:
        out, trace = rectify_iterative(original, provider, config, template)
    except ProviderError as exc:
        cause = exc.__cause__
        if isinstance(cause, FitDivergedError):
            raise CliError(f"fit diverged in iteration {exc.iteration} at step {cause.step}", EXIT_NUMERIC) from exc
        raise
    final = trace.entries[-1]
    state = init_state(config.segments).with_delta(final.delta)
    _write(args.out_params, dump_params(state) + "\n")
    if args.trace:
        lines, step = [], 0
        for call, ft in enumerate(provider.traces, start=1):
            for k, (loss, size) in enumerate(zip(ft.losses, ft.step_sizes)):
                if k == 0 and call > 1:
                    continue
                lines.append(json.dumps({"step": step, "loss": loss, "step_size": size, "call": call}) + "\n")
                step += 1
        _write(args.trace, "".join(lines))
    print(f"final loss {final.loss:.6g} psnr {psnr(out, template):.3f} dB")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.cases == 0:
        print("no cases")
        return EXIT_OK
    worst = None
    for i in range(args.cases):
        seed = args.seed + i
        res = gradcheck_case(seed, scale_analytic=1.01 if args.break_gradient else 1.0)
        if worst is None or res.max_rel_err > worst[1].max_rel_err:
            worst = (seed, res)
        if not res.passed():
            print(f"gradcheck FAILED seed {seed}: max rel err {res.max_rel_err:.3e} cosine {res.cosine:.6f}",
                  file=sys.stderr)
            return EXIT_CHECK
    seed, res = worst
    print(f"gradcheck ok: {args.cases} cases, worst seed {seed} max rel err {res.max_rel_err:.3e} "
          f"cosine {res.cosine:.6f}")
    return EXIT_OK


def gradcheck_case(seed: int, scale_analytic: float = 1.0):
    """Gradient check on a seeded synthetic case at a perturbed ground-truth state."""
    difficulty = synth.DIFFICULTIES[seed % len(synth.DIFFICULTIES)]
    case = synth.gen_case(seed, difficulty)
    rng = np.random.default_rng([seed, 99])
    delta = case.true_control_offsets + rng.normal(0.0, 0.02, case.true_control_offsets.shape)
    state = init_state(case.L).with_delta(delta)
    return check_gradient(case.distorted, state, case.template, scale_analytic=scale_analytic)


def cmd_bench(args) -> int:
    rows = bench.run_suite(args.suite, args.cases, args.seed)
    _write(args.out, bench.to_csv(rows))
    return EXIT_OK


RED, GREEN, BLUE = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)


def _to_pixels(pts, w, h):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return np.stack([(pts[:, 0] + 0.5) * w - 0.5, (pts[:, 1] + 0.5) * h - 0.5], axis=1)


def _plot(canvas, px, color, radius=0):
    h, w = canvas.shape[:2]
    for x, y in np.rint(px).astype(int):
        x0, x1, y0, y1 = max(x - radius, 0), min(x + radius + 1, w), max(y - radius, 0), min(y + radius + 1, h)
        if x0 < x1 and y0 < y1:
            canvas[y0:y1, x0:x1] = color


def _polyline(pts, per_unit=400):
    out = []
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(2, int(np.hypot(*(b - a)) * per_unit))
        t = np.linspace(0.0, 1.0, n)[:, None]
        out.append(a + t * (b - a))
    return np.vstack(out) if out else np.asarray(pts)


def overlay(image: Image, params) -> Image:
    """RGB copy of ``image`` with segments (blue), middle line (green) and control points (red)."""
    state = as_state(params)
    w, h = image.width, image.height
    canvas = np.repeat(image.data, 3, axis=2) if image.channels == 1 else image.data.copy()
    pts = state.points
    L = state.L
    for l in range(L):
        _plot(canvas, _to_pixels(_polyline(np.array([pts[l], pts[L + l]])), w, h), BLUE)
    if isinstance(params, FitLineParams):
        xs = np.linspace(-0.5, 0.5, 4 * w)
        mid = np.stack([xs, eval_middle_line(params.poly, xs)], axis=1)
    else:
        mid = _polyline(0.5 * (pts[:L] + pts[L:]))
    _plot(canvas, _to_pixels(mid, w, h), GREEN)
    _plot(canvas, _to_pixels(pts, w, h), RED, radius=1)
    return Image(canvas)


def cmd_gridviz(args) -> int:
    image = _read_image(args.input)
    params = _read_params(args.params)
    _write(args.out, save_ppm(overlay(image, params)))
    return EXIT_OK


def cmd_gencase(args) -> int:
    case = synth.gen_case(args.seed, args.difficulty)
    try:
        synth.write_case(case, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc.strerror or exc}") from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textrectify", description="Iterative text-line rectification toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("warp", help="distort a template with known parameters")
    s.add_argument("--template", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--src-size", type=_size, default=(synth.SRC_W, synth.SRC_H), metavar="WxH")
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("rectify", help="rectify an image with known parameters")
    s.add_argument("--input", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=_nonneg, default=5)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_rectify)

    s = sub.add_parser("fit", help="estimate parameters against a template")
    s.add_argument("--input", required=True)
    s.add_argument("--template", required=True)
    s.add_argument("--out-params", required=True)
    s.add_argument("--iters", type=_nonneg, default=5)
    s.add_argument("--steps", type=_nonneg, default=FitConfig.max_steps, help="optimizer steps per iteration")
    s.add_argument("--grad", choices=GRAD_MODES, default="analytic")
    s.add_argument("--trace")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cases", type=_nonneg, default=10)
    s.add_argument("--break-gradient", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="run a seeded benchmark suite")
    s.add_argument("--suite", choices=bench.SUITES, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=_nonneg, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gridviz", help="overlay control points and fitting lines on an image")
    s.add_argument("--input", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gridviz)

    s = sub.add_parser("gencase", help="write a seeded synthetic case bundle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--difficulty", choices=synth.DIFFICULTIES, default="mild")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gencase)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TpsSingularError, FitDivergedError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
