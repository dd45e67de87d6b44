import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import cached_case
from textrectify import synth
from textrectify.cli import dump_params, load_params, main, overlay
from textrectify.fitline import FitLineParams, base_points, nominal_x
from textrectify.imagebuf import Image, psnr, read_image, resize_bilinear, write_image
from textrectify.rectifier import ParamState, init_state

WARP_QUADRATIC_SHA = "7c6f747382b0ccd572f789c1581a17bb057f6a6fa067a5aae91f7bf8c59edc60"
GRIDVIZ_QUADRATIC_SHA = "5c56e4553aae084d6e074fd914f5cb01af222bb2dbc5146950f4de1d26ce357e"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def quadratic_params(a2=0.3, L=20, r=0.3):
    poly = (-a2 * 0.4 ** 2 / 2, 0.0, a2)
    segs = []
    for l in range(L):
        x = 0.8 * nominal_x(l, L)
        slope = 2 * a2 * x
        b1 = -1.0 / slope if abs(slope) > 1e-6 else 1e6
        segs.append((b1, poly[0] + a2 * x * x - b1 * x, r))
    return FitLineParams(poly, tuple(segs))


def quadratic_setup(d):
    t = synth.soften(synth.render_template(synth.banner_glyphs(np.random.default_rng(3)), 100, 32))
    write_image(t, d / "t.ppm")
    (d / "p.json").write_text(dump_params(quadratic_params()))
    return d / "t.ppm", d / "p.json"


def zero_params(d, L=20):
    p = d / "zero.json"
    p.write_text(dump_params(init_state(L)))
    return p


# --- params files -------------------------------------------------------------

def test_params_round_trip():
    fl = quadratic_params()
    assert load_params(dump_params(fl)) == fl
    st = init_state(3).with_delta(np.arange(12.0).reshape(6, 2) / 7)
    back = load_params(dump_params(st))
    assert isinstance(back, ParamState) and np.array_equal(back.delta, st.delta)


@pytest.mark.parametrize("text", [
    '{"space": "control", "L": 3, "delta": [[0, 0]]}',
    '{"space": "polar"}',
    '[1, 2]',
])
def test_params_validation(text):
    with pytest.raises(ValueError):
        load_params(text)


# --- warp ---------------------------------------------------------------------

def test_warp_identity_is_resize(tmp_path):
    t = synth.render_template(synth.banner_glyphs(np.random.default_rng(1)), 100, 32)
    write_image(t, tmp_path / "t.ppm")
    assert main(["warp", "--template", str(tmp_path / "t.ppm"), "--params", str(zero_params(tmp_path)),
                 "--out", str(tmp_path / "o.ppm")]) == 0
    out = read_image(tmp_path / "o.ppm")
    assert out.shape == (64, 200, 1)
    expected = resize_bilinear(read_image(tmp_path / "t.ppm"), 200, 64)
    assert np.abs(out.data - expected.data).max() <= 0.5 / 255 + 1e-12


def test_warp_missing_file(tmp_path, capsys):
    code = main(["warp", "--template", str(tmp_path / "nope.ppm"), "--params", str(zero_params(tmp_path)),
                 "--out", str(tmp_path / "o.ppm")])
    assert code == 2
    assert "cannot read" in capsys.readouterr().err


def test_warp_degenerate_params(tmp_path):
    t = tmp_path / "t.ppm"
    write_image(Image.filled(100, 32), t)
    p = tmp_path / "p.json"
    p.write_text(dump_params(FitLineParams((0.0, 0.0), ((0.0, 0.0, 0.2), (0.0, 0.0, 0.2)))))
    assert main(["warp", "--template", str(t), "--params", str(p), "--out", str(tmp_path / "o.ppm")]) == 3


def test_warp_quadratic_golden_and_size(tmp_path):
    t, p = quadratic_setup(tmp_path)
    assert main(["warp", "--template", str(t), "--params", str(p), "--out", str(tmp_path / "w.ppm")]) == 0
    assert sha(tmp_path / "w.ppm") == WARP_QUADRATIC_SHA
    assert main(["warp", "--template", str(t), "--params", str(p), "--out", str(tmp_path / "s.ppm"),
                 "--src-size", "120x40"]) == 0
    assert read_image(tmp_path / "s.ppm").shape == (40, 120, 1)


def test_bad_size_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["warp", "--template", "a", "--params", "b", "--out", "c", "--src-size", "12"])
    assert exc.value.code == 2


# --- rectify ------------------------------------------------------------------

@pytest.mark.parametrize("iters", ["0", "3"])
def test_rectify_zero_delta_is_resize(tmp_path, iters):
    src = Image(np.random.default_rng(0).random((64, 200, 1)))
    write_image(src, tmp_path / "in.ppm")
    src = read_image(tmp_path / "in.ppm")
    assert main(["rectify", "--input", str(tmp_path / "in.ppm"), "--params", str(zero_params(tmp_path)),
                 "--out", str(tmp_path / "o.ppm"), "--iters", iters]) == 0
    expected = resize_bilinear(src, 100, 32)
    assert np.abs(read_image(tmp_path / "o.ppm").data - expected.data).max() <= 0.5 / 255 + 1e-12


def test_rectify_case_ground_truth(tmp_path):
    d = synth.write_case(cached_case(5, "severe"), tmp_path / "case")
    trace = tmp_path / "t.jsonl"
    assert main(["rectify", "--input", str(d / "distorted.ppm"), "--params", str(d / "params.json"),
                 "--out", str(tmp_path / "o.ppm"), "--trace", str(trace)]) == 0
    assert psnr(read_image(tmp_path / "o.ppm"), read_image(d / "template.ppm")) >= 25
    recs = [json.loads(line) for line in trace.read_text().splitlines()]
    assert [r["iter"] for r in recs] == list(range(6))


def test_rectify_bad_params(tmp_path, capsys):
    write_image(Image.filled(200, 64), tmp_path / "in.ppm")
    (tmp_path / "p.json").write_text("{not json")
    assert main(["rectify", "--input", str(tmp_path / "in.ppm"), "--params", str(tmp_path / "p.json"),
                 "--out", str(tmp_path / "o.ppm")]) == 2
    assert "cannot read" in capsys.readouterr().err


# --- fit ----------------------------------------------------------------------

def test_fit_identity_template(tmp_path, capsys):
    src = synth.warp_with_control_points(synth.soften(synth.render_template(
        synth.banner_glyphs(np.random.default_rng(4)), 100, 32)), base_points(20).points)
    write_image(src, tmp_path / "in.ppm")
    write_image(resize_bilinear(read_image(tmp_path / "in.ppm"), 100, 32), tmp_path / "t.ppm")
    assert main(["fit", "--input", str(tmp_path / "in.ppm"), "--template", str(tmp_path / "t.ppm"),
                 "--out-params", str(tmp_path / "p.json")]) == 0
    st = load_params((tmp_path / "p.json").read_text())
    assert np.abs(st.delta).max() < 1e-3
    assert "final loss" in capsys.readouterr().out


def test_fit_mild_case(tmp_path, capsys):
    d = synth.write_case(cached_case(2, "mild"), tmp_path / "case")
    trace = tmp_path / "f.jsonl"
    assert main(["fit", "--input", str(d / "distorted.ppm"), "--template", str(d / "template.ppm"),
                 "--out-params", str(tmp_path / "p.json"), "--trace", str(trace)]) == 0
    out = capsys.readouterr().out
    assert float(out.split("psnr")[1].split()[0]) >= 20
    recs = [json.loads(line) for line in trace.read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(len(recs)))
    losses = [r["loss"] for r in recs]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    # the written parameters reproduce the reported result
    assert main(["rectify", "--input", str(d / "distorted.ppm"), "--params", str(tmp_path / "p.json"),
                 "--out", str(tmp_path / "r.ppm")]) == 0
    assert psnr(read_image(tmp_path / "r.ppm"), read_image(d / "template.ppm")) >= 20


def test_fit_grad_modes_agree(tmp_path, capsys):
    d = synth.write_case(cached_case(1, "mild"), tmp_path / "case")
    losses = []
    for mode in ("analytic", "fd"):
        assert main(["fit", "--input", str(d / "distorted.ppm"), "--template", str(d / "template.ppm"),
                     "--out-params", str(tmp_path / f"{mode}.json"), "--grad", mode, "--iters", "1",
                     "--steps", "8"]) == 0
        losses.append(float(capsys.readouterr().out.split()[2]))
    assert losses[1] == pytest.approx(losses[0], rel=0.1)


def test_fit_divergence_exit_code(tmp_path, monkeypatch, capsys):
    from textrectify import fitter
    d = synth.write_case(cached_case(0, "mild"), tmp_path / "case")

    def broken(self, delta):
        return float("nan"), np.zeros((40, 2))

    monkeypatch.setattr(fitter.Objective, "value_and_grad", broken)
    assert main(["fit", "--input", str(d / "distorted.ppm"), "--template", str(d / "template.ppm"),
                 "--out-params", str(tmp_path / "p.json")]) == 3
    assert "step 0" in capsys.readouterr().err


def test_fit_template_size_checked(tmp_path):
    write_image(Image.filled(200, 64), tmp_path / "in.ppm")
    write_image(Image.filled(50, 32), tmp_path / "t.ppm")
    assert main(["fit", "--input", str(tmp_path / "in.ppm"), "--template", str(tmp_path / "t.ppm"),
                 "--out-params", str(tmp_path / "p.json")]) == 2


# --- gradcheck ----------------------------------------------------------------

def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "0", "--cases", "2"]) == 0
    assert "worst seed" in capsys.readouterr().out


def test_gradcheck_fault_injection(capsys):
    assert main(["gradcheck", "--seed", "0", "--cases", "2", "--break-gradient"]) == 1
    assert "seed 0" in capsys.readouterr().err


def test_gradcheck_no_cases(capsys):
    assert main(["gradcheck", "--cases", "0"]) == 0
    assert "no cases" in capsys.readouterr().out


# --- gridviz ------------------------------------------------------------------

def test_gridviz_identity_rows(tmp_path):
    write_image(Image.filled(200, 64, 0.5), tmp_path / "in.ppm")
    assert main(["gridviz", "--input", str(tmp_path / "in.ppm"), "--params", str(zero_params(tmp_path)),
                 "--out", str(tmp_path / "g.ppm")]) == 0
    g = read_image(tmp_path / "g.ppm")
    assert g.channels == 3
    red = (g.data[..., 0] == 1) & (g.data[..., 1] == 0) & (g.data[..., 2] == 0)
    rows = set(np.nonzero(red.any(axis=1))[0].tolist())
    # y = -0.5 and y = +0.5 sit half a pixel outside rows 0 and 63; the 3x3 marks are clipped there
    assert rows <= {0, 1, 62, 63} and rows & {0, 1} and rows & {62, 63}
    for band in (red[:2], red[-2:]):
        cols = np.nonzero(band.any(axis=0))[0]
        assert np.count_nonzero(np.diff(cols) > 1) + 1 == 20  # one mark per segment
    green = (g.data[..., 1] == 1) & (g.data[..., 0] == 0)
    assert len(set(np.nonzero(green.any(axis=1))[0].tolist())) == 1  # straight middle line


def test_gridviz_quadratic_curve(tmp_path):
    t, p = quadratic_setup(tmp_path)
    main(["warp", "--template", str(t), "--params", str(p), "--out", str(tmp_path / "w.ppm")])
    assert main(["gridviz", "--input", str(tmp_path / "w.ppm"), "--params", str(p),
                 "--out", str(tmp_path / "g.ppm")]) == 0
    assert sha(tmp_path / "g.ppm") == GRIDVIZ_QUADRATIC_SHA
    g = read_image(tmp_path / "g.ppm").data
    green = (g[..., 1] == 1) & (g[..., 0] == 0) & (g[..., 2] == 0)
    poly = quadratic_params().poly
    for c in (10, 60, 100, 140, 190):
        x = (c + 0.5) / 200 - 0.5
        row = (poly[0] + poly[2] * x * x + 0.5) * 64 - 0.5
        hits = np.nonzero(green[:, c])[0]
        assert len(hits) and np.abs(hits - row).min() <= 1.0
    assert np.nonzero(green[:, 10])[0].mean() > np.nonzero(green[:, 100])[0].mean() + 2


def test_gridviz_unwritable(tmp_path):
    write_image(Image.filled(200, 64), tmp_path / "in.ppm")
    assert main(["gridviz", "--input", str(tmp_path / "in.ppm"), "--params", str(zero_params(tmp_path)),
                 "--out", str(tmp_path / "missing" / "g.ppm")]) == 2


def test_overlay_keeps_input_pixels_elsewhere():
    img = Image.filled(200, 64, 0.25)
    out = overlay(img, init_state(5))
    assert np.mean(np.all(out.data == 0.25, axis=-1)) > 0.8


# --- gencase / bench / entry point ----------------------------------------------

def test_gencase(tmp_path):
    assert main(["gencase", "--seed", "4", "--difficulty", "perspective", "--out", str(tmp_path / "c")]) == 0
    back = synth.read_case(tmp_path / "c")
    assert back.true_params == cached_case(4, "perspective").true_params


def test_bench_boundary_csv(tmp_path, monkeypatch):
    monkeypatch.setenv("ESIR_THREADS", "2")
    assert main(["bench", "--suite", "boundary", "--cases", "3", "--out", str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "suite,config,cases,mean_psnr,std_psnr,mean_mse,wall_s"
    assert [ln.split(",")[1] for ln in lines[1:]] == ["compose", "chained"]


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "textrectify.cli", "gradcheck", "--cases", "0"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "no cases" in res.stdout
