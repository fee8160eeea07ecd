import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceql import expr as ex
from ceql.errors import DegenerateModel, InvalidConfig, InvalidWindow
from ceql.frf import (FrfConfig, FrfData, FrfModel, FrfTerm, Resonance, SynthSpec, _FrfState,
                      baseline, default_windows, detect_peak, fit_frf, frf_forward, init_frf_model,
                      peak_report, polynomial_degree, published_model, real_poles, resonance_centers,
                      synth_frf, three_resonance_spec)

# full published surrogate at (w, d) = (0.69792, 0), from a hand transcription
PUBLISHED_AT_PEAK = -7.000467502900313


def const_term(A, gamma, c):
    return FrfTerm(A, gamma, ex.Const(c))


def test_trend_only():
    m = FrfModel(2.0, 0.5, [const_term(0.0, 0.01, 0.7)])
    v, ok = frf_forward(m, [0.0, 1.0], 3.0)
    assert ok.all() and list(v) == [0.5, 2.5]


def test_single_peak_value():
    m = FrfModel(0.0, 0.0, [const_term(1.0, 0.01, 0.7)])
    assert frf_forward(m, 0.7, 0.0)[0][0] == pytest.approx(100.0)


def test_published_model():
    m = published_model()
    v, ok = frf_forward(m, 0.69792, 0.0)
    assert ok[0] and v[0] == pytest.approx(PUBLISHED_AT_PEAK, rel=1e-12)
    last = m.terms[-1]
    assert last.A / last.gamma == pytest.approx(4.827897, rel=1e-6)
    assert max(polynomial_degree(t.expression()) for t in m.terms) == 4


def test_published_model_poles_and_window():
    m = published_model()
    grid = np.arange(0.0, 2.0 + 5e-4, 1e-3)
    for d in (0.0, 5.92):
        v, ok = frf_forward(m, grid, d)
        poles = real_poles(m, d)
        near = np.zeros(grid.shape, dtype=bool)
        for p in poles:
            near |= np.abs(grid - p) < 2e-3
        assert np.isfinite(v[~near]).all() and ok[~near].all()
    lo, hi = default_windows()[0]
    assert any(lo <= c <= hi for c in resonance_centers(m, 0.0))


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(1e-3, 0.5), st.floats(0, 2)), min_size=1, max_size=5))
def test_positive_gamma_always_finite(rows):
    m = FrfModel(1.0, 0.1, [const_term(A, g, c) for A, g, c in rows])
    v, ok = frf_forward(m, np.linspace(0, 2, 2001), 1.0)
    assert ok.all() and np.isfinite(v).all()


@given(st.floats(0.001, 0.1), st.floats(0, 2))
def test_zero_amplitude_term_is_invisible(g, c):
    base = three_resonance_spec().as_model()
    more = FrfModel(base.a, base.b, base.terms + [const_term(0.0, g, c)])
    om = np.linspace(0, 2, 301)
    assert np.array_equal(frf_forward(base, om, 2.0)[0], frf_forward(more, om, 2.0)[0])


def test_synth_exact_and_deterministic():
    spec = three_resonance_spec()
    data = synth_frf(spec, [0, 2, 4, 6])
    assert len(data) == 1600
    np.testing.assert_array_equal(data.y, np.clip(spec(data.omega, data.d), 0, None))
    noisy = synth_frf(spec, [0, 2], noise_sd=0.01, seed=3)
    assert np.array_equal(noisy.y, synth_frf(spec, [0, 2], noise_sd=0.01, seed=3).y)
    assert (noisy.y >= 0).all()
    with pytest.raises(InvalidConfig):
        synth_frf(SynthSpec(0, 0, (Resonance(1, -0.1, 1.0),)), [0])


def test_generator_peak_within_grid_step():
    spec = three_resonance_spec()
    data = synth_frf(spec, [0, 3, 6])
    step = 2.0 / 399
    for lvl in (0, 3, 6):
        assert abs(detect_peak(data, default_windows()[0], lvl) - (0.75 - 0.02 * lvl)) <= step


def test_model_peak_matches_generator():
    spec = three_resonance_spec()
    m = spec.as_model()
    for lvl in (0.0, 4.0):
        for (lo, hi), r in zip(default_windows(), spec.resonances[1:]):
            assert abs(detect_peak(m, (lo, hi), lvl) - float(r.h(lvl))) <= 1e-4


def test_detect_peak_averages_repetitions():
    data = FrfData([0.5, 0.6, 0.5, 0.6], [0, 0, 0, 0], [1.0, 0.0, 0.0, 1.0], [0, 0, 1, 1])
    assert detect_peak(data, (0.4, 0.7), 0) == pytest.approx(0.55)
    with pytest.raises(InvalidWindow):
        detect_peak(data, (0.8, 0.9), 0)
    with pytest.raises(InvalidWindow):
        detect_peak(data, (0.7, 0.4), 0)


def test_peak_report():
    spec = three_resonance_spec()
    data = synth_frf(spec, [0, 5])
    rows = peak_report(spec.as_model(), data)
    assert len(rows) == 4
    for r in rows:
        assert abs(r.measured - r.predicted) <= 2.0 / 399
    with pytest.warns(UserWarning):
        rows = peak_report(spec.as_model(), data, levels=[0.0, 1.0])
    assert len(rows) == 2


def test_csv_roundtrip(tmp_path):
    data = synth_frf(three_resonance_spec(), [0, 1], noise_sd=0.01)
    data.to_csv(tmp_path / "f.csv")
    back = FrfData.from_csv(tmp_path / "f.csv")
    assert np.array_equal(back.y, data.y) and np.array_equal(back.repetition, data.repetition)


def test_baseline_ignores_peaks():
    om = np.linspace(0, 2, 400)
    y = 0.5 * om + 0.2 + 0.03 / ((om - 0.75) ** 2 + 0.003)
    a, b = baseline(om, y)
    a_ls, b_ls = np.polyfit(om, y, 1)
    # the peak tail still lifts the envelope a little; plain least squares is far off
    assert abs(a - 0.5) < 0.05 and abs(b - 0.2) < 0.1
    assert abs(a_ls - 0.5) > 0.5


def small_state(seed=0):
    data = synth_frf(three_resonance_spec(), [0, 2, 4])
    cfg = FrfConfig(n_terms=4, seed=seed, init_im_ratio=0.5)
    model = init_frf_model(4, cfg, 2.0, data)
    model.a, model.b = baseline(data.omega, data.y)
    return data, model, _FrfState(model, data)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_kernel_matches_reference(seed):
    _, _, st_ = small_state(seed)
    fast = st_.loss_grad(1e-3, 1e-2)
    ref = st_.loss_grad_reference(1e-3, 1e-2)
    assert fast[0] == pytest.approx(ref[0], rel=1e-10)
    np.testing.assert_allclose(fast[-1], ref[-1], rtol=1e-8, atol=1e-12)


def test_reference_gradient_finite_difference():
    _, _, s = small_state(0)
    total, *_, grad = s.loss_grad_reference(1e-3, 1e-2)
    rng = np.random.default_rng(0)
    idx = rng.choice(np.flatnonzero(s.mask), 12, replace=False)
    h = 1e-6
    for i in idx:
        for unit, part in ((1.0, grad[i].real), (1j, grad[i].imag)):
            if i < 2 + 2 * s.T and unit == 1j:
                continue
            s.theta[i] += h * unit
            up = s.loss_grad_reference(1e-3, 1e-2)[0]
            s.theta[i] -= 2 * h * unit
            dn = s.loss_grad_reference(1e-3, 1e-2)[0]
            s.theta[i] += h * unit
            assert part == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-7)


def test_write_back_zeroes_masked_weights():
    _, model, s = small_state(0)
    s.hm[0, np.flatnonzero(s.hm[0])[:3]] = False
    s.write_back(model)
    h = model.terms[0].h
    assert np.all(h.params[~h.active] == 0)


def test_kill_term():
    _, model, s = small_state(0)
    s.kill_term(1)
    s.write_back(model)
    assert not model.terms[1].alive and model.terms[1].A == 0
    assert len(model.alive_terms) == 3


def test_fit_rejects_tiny_data():
    data = synth_frf(three_resonance_spec(), [0], n_per_level=400)
    with pytest.raises(InvalidConfig):
        fit_frf(data)


def test_short_fit_respects_floor_and_degree():
    data = synth_frf(three_resonance_spec(), [0, 2, 4, 6])
    cfg = FrfConfig(scale=0.003)
    fit = fit_frf(data, cfg)
    for ev in fit.prune_events:
        if ev["phase"] == 2:
            assert ev["active_after"] >= cfg.min_edges
    # too short for the imaginary penalty to finish; check the structure only
    for t in fit.model.alive_terms:
        deg = polynomial_degree(ex.extract(t.h, im_tolerance=math.inf))
        assert deg is not None and deg <= 4


def test_constant_targets_give_trend_only():
    om = np.tile(np.linspace(0, 2, 100), 2)
    data = FrfData(om, np.repeat([0.0, 1.0], 100), np.full(200, 3.0), np.zeros(200, dtype=int))
    fit = fit_frf(data, FrfConfig(n_terms=3, scale=0.01))
    v, ok = frf_forward(fit.model, om[:100], 0.0)
    assert ok.all()
    np.testing.assert_allclose(v, 3.0, atol=0.05)
