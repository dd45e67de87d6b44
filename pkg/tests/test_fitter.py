import json

import numpy as np
import pytest

from conftest import cached_case
from textrectify import fitter, synth
from textrectify.fitline import base_points
from textrectify.fitter import FitConfig, FitDivergedError, FitterProvider, Objective, check_gradient, fit, grad_loss, loss
from textrectify.imagebuf import Image
from textrectify.rectifier import RectifyConfig, init_state, rectify_iterative, rectify_once

CFG = RectifyConfig()


def banner_pair(shift=(0.0, 0.0), scale=1.0):
    t = synth.soften(synth.render_template(synth.banner_glyphs(np.random.default_rng(9)), 100, 32))
    pts = scale * base_points(20).points + np.asarray(shift)
    return t, synth.warp_with_control_points(t, pts)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(grad_mode="exact")
    with pytest.raises(ValueError):
        FitConfig(fd_step=0.1)
    with pytest.raises(ValueError):
        FitConfig(backtrack=1.0)
    with pytest.raises(ValueError):
        FitConfig(step_size=0.0)


def test_loss_zero_on_own_rectification(rng):
    src = Image(rng.random((64, 200, 1)))
    state = init_state(20).with_delta(rng.normal(0, 0.01, (40, 2)))
    assert loss(src, state, rectify_once(src, state, CFG), CFG) == 0.0


def test_loss_zeros_vs_ones():
    assert loss(Image.filled(200, 64, 0.0), init_state(20), Image.filled(100, 32, 1.0), CFG) == 1.0


def test_loss_dimension_mismatch():
    with pytest.raises(ValueError):
        loss(Image.filled(200, 64), init_state(20), Image.filled(50, 32), CFG)


def test_ground_truth_beats_identity():
    c = cached_case(0, "curved")
    assert loss(c.distorted, init_state(20), c.template) > loss(c.distorted, c.true_state(), c.template) > 0


def test_constant_images_give_zero_gradient():
    g = grad_loss(Image.filled(200, 64, 0.4), init_state(20), Image.filled(100, 32, 0.4), CFG)
    assert g.shape == (40, 2) and not g.any()


def test_unknown_gradient_mode():
    with pytest.raises(ValueError):
        grad_loss(Image.filled(200, 64), init_state(20), Image.filled(100, 32), CFG, mode="both")


def test_objective_grid_matches_rectifier():
    c = cached_case(1, "perspective")
    ob = Objective(c.distorted, c.template, CFG)
    assert ob.value(c.true_control_offsets) == pytest.approx(loss(c.distorted, c.true_state(), c.template), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 5])
def test_analytic_gradient_matches_fd(seed):
    c = cached_case(seed, "curved")
    state = c.true_state().with_delta(c.true_control_offsets + np.random.default_rng(seed).normal(0, 0.02, (40, 2)))
    res = check_gradient(c.distorted, state, c.template)
    assert res.passed(), (res.max_rel_err, res.cosine)
    assert res.kept_pixels > 0.9


def test_gradient_check_catches_scaled_gradient():
    c = cached_case(0, "mild")
    res = check_gradient(c.distorted, init_state(20), c.template, scale_analytic=1.001)
    assert not res.passed()


def test_relative_errors_floor():
    rel = fitter.relative_errors([1.0, 0.0, 1e-12], [1.0, 0.0, 0.0])
    assert rel.tolist() == [0.0, 0.0, pytest.approx(1e-6)]


@pytest.mark.parametrize("seed", range(4))
def test_gradient_small_at_ground_truth(seed):
    c = cached_case(seed, "mild")
    ob = Objective(c.distorted, c.template, CFG)
    g0 = np.linalg.norm(ob.value_and_grad(np.zeros((40, 2)))[1])
    gt = np.linalg.norm(ob.value_and_grad(c.true_control_offsets)[1])
    assert gt < 0.1 * g0


def test_fit_stays_at_identity_optimum():
    t, _ = banner_pair()
    src = synth.warp_with_control_points(t, base_points(20).points)
    tmpl = rectify_once(src, init_state(20), CFG)
    state, trace = fit(src, tmpl, CFG)
    assert np.abs(state.delta).max() < 1e-3
    assert trace.losses[-1] < 1e-6


@pytest.mark.parametrize("shift", [(0.02, -0.015), (-0.02, 0.01)])
def test_fit_recovers_translation(shift):
    # A slightly shrunken, shifted frame keeps every rectified tap inside the
    # source, so the true offsets are the optimum; their mean is the shift.
    t, d = banner_pair(shift, scale=0.93)
    state, trace = fit(d, t, CFG, FitConfig(max_steps=250))
    assert np.abs(state.delta.mean(axis=0) - shift).max() < 0.01


def test_fit_trace_is_monotone_and_serializes():
    c = cached_case(2, "curved")
    _, trace = fit(c.distorted, c.template, CFG, FitConfig(max_steps=30))
    assert all(b <= a for a, b in zip(trace.losses, trace.losses[1:]))
    recs = [json.loads(line) for line in trace.to_jsonl().splitlines()]
    assert recs[0] == {"step": 0, "loss": trace.losses[0], "step_size": 0.0}
    assert all(0 < r["step_size"] <= 0.05 + 1e-15 for r in recs[1:])


def test_fd_mode_agrees_with_analytic():
    c = cached_case(3, "mild")
    fc = dict(max_steps=3)
    _, ta = fit(c.distorted, c.template, CFG, FitConfig(**fc))
    _, tf = fit(c.distorted, c.template, CFG, FitConfig(grad_mode="fd", **fc))
    assert tf.losses[-1] == pytest.approx(ta.losses[-1], rel=0.1)


def test_non_finite_loss_reports_step(monkeypatch):
    c = cached_case(0, "mild")
    real = Objective.value_and_grad
    calls = []

    def flaky(self, delta):
        calls.append(1)
        f, g = real(self, delta)
        return (np.nan, g) if len(calls) == 3 else (f, g)

    monkeypatch.setattr(Objective, "value_and_grad", flaky)
    with pytest.raises(FitDivergedError) as exc:
        fit(c.distorted, c.template, CFG)
    assert exc.value.step == 2


def test_provider_at_optimum_is_still():
    c = cached_case(0, "mild")
    tmpl = rectify_once(c.distorted, c.true_state(), CFG)
    prov = FitterProvider(c.distorted, tmpl, CFG)
    inc = prov.estimate_delta(tmpl, c.true_state())
    assert np.abs(inc).max() < 1e-3


def test_provider_first_call_helps_on_curved():
    c = cached_case(6, "curved")
    prov = FitterProvider(c.distorted, c.template, CFG)
    inc = prov.estimate_delta(rectify_once(c.distorted, init_state(20), CFG), init_state(20))
    assert loss(c.distorted, init_state(20).with_delta(inc), c.template) < loss(c.distorted, init_state(20), c.template)
    assert np.abs(inc).max() <= 0.2


def test_five_calls_compete_with_one_long_run():
    wins = 0
    n = 10
    for seed in range(n):
        c = cached_case(seed, "mild")
        _, trace = rectify_iterative(c.distorted, FitterProvider(c.distorted, c.template, CFG), CFG, c.template)
        _, long_trace = fit(c.distorted, c.template, CFG, FitConfig(max_steps=250))
        wins += trace[-1].loss <= 1.5 * long_trace.losses[-1]
    assert wins >= 0.8 * n
