import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import savgol_filter

from csimotion.channel import ImpairmentModel, reference_config, synthesize_pair
from csimotion.csilog import RxSeries
from csimotion.pipeline import (
    AxisMismatchError,
    BackgroundSpec,
    CompositeSeries,
    PipelineConfig,
    PipelineError,
    background_profile,
    cross_multiply,
    derivative,
    estimate_background,
    normalize,
    phase_derivative,
    read_trace_csv,
    run_pipeline,
    savitzky_golay,
    subcarrier_average,
    unwrap_phase,
    window_indices,
    write_flags_json,
    write_trace_csv,
)


def series(values, times=None, freqs=None):
    values = np.atleast_2d(np.asarray(values, dtype=complex))
    n, k = values.shape
    times = np.arange(n) * 1e-3 if times is None else np.asarray(times, dtype=float)
    freqs = 2.1e9 + 15e3 * np.arange(k) if freqs is None else np.asarray(freqs, dtype=float)
    return RxSeries(times, freqs, values)


def comp(values):
    s = series(values)
    return CompositeSeries(s.times, s.freqs, s.values)


def test_cross_multiply_examples():
    assert cross_multiply(series([[1]]), series([[1j]])).values[0, 0] == -1j
    z = 0.3 - 2.1j
    out = cross_multiply(series([[z]]), series([[z]])).values[0, 0]
    assert abs(out.imag) <= 1e-15 and out.real == pytest.approx(abs(z) ** 2)


def test_cross_multiply_cancels_common_phase():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 6)) + 1j * rng.normal(size=(20, 6))
    b = rng.normal(size=(20, 6)) + 1j * rng.normal(size=(20, 6))
    c = np.exp(1j * rng.uniform(-np.pi, np.pi, (20, 6)))
    plain = cross_multiply(series(a), series(b)).values
    rotated = cross_multiply(series(c * a), series(c * b)).values
    np.testing.assert_allclose(rotated, plain, atol=1e-12)


def test_cross_multiply_axis_checks():
    with pytest.raises(AxisMismatchError):
        cross_multiply(series([[1, 2]]), series([[1, 2, 3]]))
    with pytest.raises(AxisMismatchError):
        cross_multiply(series([[1], [2]]), series([[1], [2]], times=[0, 2e-3]))
    with pytest.raises(AxisMismatchError):
        cross_multiply(series([[1]]), series([[1]], freqs=[2.2e9]))


def test_normalize_examples():
    u, flags = normalize(comp([[3 + 4j, 1 + 0j]]))
    np.testing.assert_allclose(u.values, [[0.6 + 0.8j, 1]])
    assert flags == []
    u, flags = normalize(comp([[1j, 0], [0, 0]]))
    np.testing.assert_array_equal(u.values, [[1j, 1], [1j, 1]])
    assert flags == [(0, 1), (1, 0), (1, 1)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=40))
def test_normalize_unit_modulus(pairs):
    values = np.array([[complex(a, b) for a, b in pairs]])
    u, flags = normalize(comp(values), 1e-12)
    ok = np.abs(values) >= 1e-12
    assert np.max(np.abs(np.abs(u.values[ok]) - 1), initial=0.0) <= 1e-12
    assert len(flags) == int((~ok).sum())


def test_subcarrier_average():
    assert subcarrier_average(comp([[1, 1j]]))[0] == pytest.approx(0.5 + 0.5j)
    z = np.exp(0.7j)
    assert subcarrier_average(comp([[z, z, z]]))[0] == pytest.approx(z)
    rng = np.random.default_rng(1)
    u = np.exp(1j * rng.uniform(-np.pi, np.pi, (30, 12)))
    want = np.array([sum(row) / len(row) for row in u.tolist()])
    np.testing.assert_allclose(subcarrier_average(comp(u)), want, atol=1e-15)
    assert np.all(np.abs(subcarrier_average(comp(u))) <= 1 + 1e-15)


def test_unwrap_examples():
    out = unwrap_phase(np.exp(1j * np.array([0.0, 3.0, -3.0])))
    np.testing.assert_allclose(out, [0.0, 3.0, 2 * np.pi - 3.0], atol=1e-12)
    assert out[2] == pytest.approx(3.2832, abs=1e-4)
    np.testing.assert_allclose(unwrap_phase(np.full(5, np.exp(0.4j))), 0.4, atol=1e-15)
    ramp = 0.3 * np.arange(1000) + 0.1
    np.testing.assert_allclose(unwrap_phase(np.exp(1j * ramp)), ramp, atol=1e-9)
    with pytest.raises(PipelineError):
        unwrap_phase([])


def test_unwrap_agrees_with_numpy():
    rng = np.random.default_rng(2)
    ang = np.cumsum(rng.uniform(-3.0, 3.0, 500))
    z = np.exp(1j * ang)
    np.testing.assert_allclose(unwrap_phase(z), np.unwrap(np.angle(z)), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=60))
def test_unwrap_congruence_and_steps(angles):
    z = np.exp(1j * np.asarray(angles))
    out = unwrap_phase(z)
    assert -np.pi < out[0] <= np.pi
    d = np.diff(out)
    assert np.all(d <= np.pi + 1e-12) and np.all(d > -np.pi - 1e-12)
    resid = np.mod(out - np.angle(z) + np.pi, 2 * np.pi) - np.pi
    assert np.max(np.abs(resid)) <= 1e-9


def test_background_window():
    t = np.arange(100) * 0.01
    phi = np.full(100, 1.7)
    assert estimate_background(phi, (0, 10)) == pytest.approx(1.7)
    seg = np.concatenate([[1, -1, 2, -2], np.full(96, 5.0)])
    assert estimate_background(seg, (0, 4)) == 0
    assert window_indices(t, BackgroundSpec(start_s=0.0, end_s=0.5)) == (0, 50)
    assert window_indices(t, BackgroundSpec(start=3, end=9)) == (3, 9)
    with pytest.raises(PipelineError):
        estimate_background(phi, (5, 5))
    with pytest.raises(PipelineError):
        estimate_background(phi, (90, 120))


def test_background_modes():
    t = np.arange(50) * 0.01
    phi = np.linspace(0, 1, 50)
    assert np.all(background_profile(phi, t, BackgroundSpec(mode="none")) == 0)
    np.testing.assert_allclose(background_profile(phi, t, BackgroundSpec(mode="external", profile=(0.5,))), 0.5)
    with pytest.raises(PipelineError):
        background_profile(phi, t, BackgroundSpec(mode="external", profile=(1.0, 2.0)))
    ma = background_profile(phi, t, BackgroundSpec(mode="moving_average", length=5))
    np.testing.assert_allclose(ma[2:-2], phi[2:-2], atol=1e-12)


def test_background_subtraction_is_idempotent():
    cfg = reference_config([0.1], noise_std=0.05, subcarriers=16, sample_interval=0.005)
    rx0, rx1, _ = synthesize_pair(cfg)
    res = run_pipeline(rx1, rx0, PipelineConfig(wavelength=cfg.geometry.wavelength))
    win = window_indices(res.phase.times, BackgroundSpec())
    assert abs(estimate_background(res.phase.phi, win)) < 1e-12
    assert np.std(res.phase.phi[win[0]:win[1]]) < 0.05


def per_window_fit(y, window, order):
    """Direct least squares at every interior centre: the oracle for the smoother."""
    half = window // 2
    x = np.arange(-half, half + 1)
    out = np.full(len(y), np.nan)
    for c in range(half, len(y) - half):
        coef = np.polyfit(x, y[c - half:c + half + 1], order)
        out[c] = np.polyval(coef, 0.0)
    return out


def test_savgol_matches_oracles():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 4 * np.pi, 400)
    noisy = np.sin(t) + rng.normal(0, 0.1, t.size)
    ours = savitzky_golay(noisy, 31, 3)
    oracle = per_window_fit(noisy, 31, 3)
    np.testing.assert_allclose(ours[15:-15], oracle[15:-15], atol=1e-10)
    np.testing.assert_allclose(ours, savgol_filter(noisy, 31, 3, mode="interp"), atol=1e-10)
    np.testing.assert_allclose(savitzky_golay(noisy, 31, 3, edge="mirror"),
                               savgol_filter(noisy, 31, 3, mode="mirror"), atol=1e-10)
    assert np.std(ours - np.sin(t)) < 0.5 * np.std(noisy - np.sin(t))


def test_savgol_examples():
    x = np.arange(40, dtype=float)
    quad = 0.5 * x**2 - 3 * x + 2
    np.testing.assert_allclose(savitzky_golay(quad, 7, 2), quad, atol=1e-10)
    np.testing.assert_allclose(savitzky_golay(np.full(9, 2.5), 7, 2), 2.5, atol=1e-12)
    with pytest.raises(ValueError):
        savitzky_golay(quad, 6, 2)
    with pytest.raises(ValueError):
        savitzky_golay(quad, 5, 5)
    with pytest.raises(ValueError):
        savitzky_golay(quad[:4], 5, 2)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 4).flatmap(lambda order: st.tuples(
        st.just(order),
        st.integers(order // 2 + 1, 10).map(lambda h: 2 * h + 1),
        st.lists(st.floats(-2, 2), min_size=order + 1, max_size=order + 1),
    )),
    st.integers(0, 30),
)
def test_savgol_reproduces_polynomials(params, extra):
    order, window, coeffs = params
    x = np.linspace(-1, 1, window + extra)
    y = np.polyval(coeffs, x)
    for deg in range(order + 1):
        p = np.polyval(coeffs[-(deg + 1):], x)
        np.testing.assert_allclose(savitzky_golay(p, window, order), p, atol=1e-10)
    np.testing.assert_allclose(savitzky_golay(y, window, order), y, atol=1e-10)


def test_derivative_examples():
    t = np.arange(100) * 1e-3
    dop = phase_derivative(2 * np.pi * 10 * t, t, 0.1428)
    np.testing.assert_allclose(dop.dnu_hz, 10.0, rtol=1e-9)
    np.testing.assert_allclose(dop.v_delta, 1.428, rtol=1e-9)
    np.testing.assert_allclose(dop.v_delta, 0.1428 * dop.dnu_hz, rtol=1e-15)
    assert np.max(np.abs(phase_derivative(np.full(10, 3.0), t[:10], 0.1).dnu_hz)) <= 1e-9
    with pytest.raises(PipelineError, match="insufficient samples for derivative"):
        derivative([1.0], [0.0])
    with pytest.raises(PipelineError):
        derivative([1.0, 2.0, 3.0], [0.0, 1.0, 1.0])


def test_derivative_exact_for_quadratics_on_irregular_grid():
    rng = np.random.default_rng(4)
    t = np.cumsum(rng.uniform(0.5, 1.5, 50))
    y = 3 * t**2 - 2 * t + 1
    np.testing.assert_allclose(derivative(y, t), 6 * t - 2, rtol=1e-9)


def mapped_grid(n, warp=0.1, phase=0.3):
    """Non-uniform times t = s + warp * sin(2 pi s + phase) / (2 pi) over uniform s."""
    s = np.linspace(0.0, 2.0, n + 1)
    return s + warp * np.sin(2 * np.pi * s + phase) / (2 * np.pi)


def derivative_error(n):
    t = mapped_grid(n)
    return np.max(np.abs(derivative(np.sin(3 * t), t) - 3 * np.cos(3 * t)))


@pytest.mark.parametrize("n", [50, 100, 200])
def test_derivative_second_order(n):
    assert derivative_error(n) / derivative_error(2 * n) >= 3.5


def test_static_only_gives_zero_speed():
    cfg = reference_config([0.1], subcarriers=8, sample_interval=0.01)
    g = replace(cfg.geometry, legs=(), velocity_x=0.0)
    rx0, rx1, _ = synthesize_pair(replace(cfg, geometry=g))
    res = run_pipeline(rx1, rx0, PipelineConfig(wavelength=g.wavelength))
    assert np.max(np.abs(res.doppler.v_delta)) <= 1e-9


def test_dominant_echo_peak_at_crossing():
    cfg = reference_config([0.1], static_amplitude=0.0, subcarriers=8, sample_interval=2e-3)
    rx0, rx1, truth = synthesize_pair(cfg)
    res = run_pipeline(rx1, rx0, PipelineConfig(wavelength=cfg.geometry.wavelength))
    k = int(np.argmax(np.abs(res.doppler.v_delta)))
    assert abs(res.doppler.times[k] - truth.crossing_time) <= cfg.sample_interval + 1e-12


def test_impairment_cancels_at_trace_level():
    cfg = reference_config([0.1], subcarriers=16, sample_interval=2e-3)
    on = replace(cfg, impairment=ImpairmentModel(phase_step_std=0.05, seed=9))
    pcfg = PipelineConfig(wavelength=cfg.geometry.wavelength)
    a = run_pipeline(*synthesize_pair(cfg)[1::-1], pcfg).doppler.v_delta
    b = run_pipeline(*synthesize_pair(on)[1::-1], pcfg).doppler.v_delta
    assert np.max(np.abs(a - b)) <= 1e-9


def test_run_pipeline_errors():
    one = series([[1, 1]])
    with pytest.raises(PipelineError, match="insufficient samples for derivative"):
        run_pipeline(one, one)
    short = series(np.ones((10, 2)))
    with pytest.raises(PipelineError, match="sg_window"):
        run_pipeline(short, short)
    with pytest.raises(AxisMismatchError):
        run_pipeline(series(np.ones((40, 2))), series(np.ones((40, 3))))


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(sg_window=30)
    with pytest.raises(ValueError):
        PipelineConfig(sg_window=3, sg_order=3)
    with pytest.raises(ValueError):
        PipelineConfig(wavelength=0)
    with pytest.raises(ValueError):
        BackgroundSpec(mode="adaptive")


def test_trace_csv_round_trip():
    cfg = reference_config([0.1], subcarriers=4, sample_interval=0.01)
    rx0, rx1, _ = synthesize_pair(cfg)
    res = run_pipeline(rx1, rx0, PipelineConfig(wavelength=cfg.geometry.wavelength))
    buf = io.StringIO()
    write_trace_csv(res, buf)
    assert buf.getvalue().splitlines()[0] == "t_s,phi_raw,phi,phi_sg,dnu_hz,v_delta_mps"
    back = read_trace_csv(io.StringIO(buf.getvalue()))
    np.testing.assert_array_equal(back.v_delta, res.doppler.v_delta)
    np.testing.assert_array_equal(back.times, res.doppler.times)
    flags = io.StringIO()
    write_flags_json([(1, 2)], flags)
    assert json.loads(flags.getvalue()) == {"degenerate_samples": [[1, 2]], "count": 1}
