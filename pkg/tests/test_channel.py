import io
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad

from csimotion.channel import (
    MMPM,
    SPEED_OF_LIGHT,
    ImpairmentModel,
    Leg,
    NoiseModel,
    PathComponent,
    RecordTemplate,
    ScenarioGeometry,
    SimulationConfig,
    StaticChannel,
    back_and_forth,
    differential_doppler,
    doppler_at_rx,
    emit_capture,
    indoor_geometry,
    midpoint_differential_doppler,
    path_lengths,
    range_rate,
    reference_config,
    synthesize_pair,
    velocity_from_midpoint,
    write_truth_csv,
)
from csimotion.csilog import capture_to_series, format_capture, parse_capture

LAMBDA = 0.1428


def geometry(**kw):
    base = dict(rx0_pos=(-0.025, 0.0), rx1_pos=(0.025, 0.0), reflector_y=0.769594,
                reflector_x0=-1.0, velocity_x=1.0, wavelength=LAMBDA)
    base.update(kw)
    return ScenarioGeometry(**base)


def oracle_length(t, rx, g, tx=None, tx_rate=0.0):
    """Path length from first principles, independent of the package."""
    x = g.reflector_x0 + g.velocity_x * t
    r = math.hypot(x - rx[0], g.reflector_y - rx[1])
    leg = math.hypot(x - tx[0], g.reflector_y - tx[1]) if tx is not None else tx_rate * t
    return leg + r


def fd_doppler(t, rx, g, h=1e-5, **kw):
    dl = (oracle_length(t + h, rx, g, **kw) - oracle_length(t - h, rx, g, **kw)) / (2 * h)
    return -dl / g.wavelength


@pytest.mark.parametrize("tx", [None, (3.0, -40.0)])
def test_doppler_matches_finite_difference(tx):
    g = geometry(tx_pos=tx, tx_range_rate=0.3 if tx is None else 0.0)
    kw = {"tx": tx, "tx_rate": 0.3 if tx is None else 0.0}
    for t in np.linspace(0.05, 1.95, 39):
        for j in (0, 1):
            want = fd_doppler(t, g.rx(j), g, **kw)
            got = float(doppler_at_rx(t, j, g))
            assert abs(got - want) <= 1e-6 * max(abs(want), 1e-3)
        want = fd_doppler(t, g.rx1_pos, g, **kw) - fd_doppler(t, g.rx0_pos, g, **kw)
        assert float(differential_doppler(t, g)) == pytest.approx(want, rel=1e-6, abs=1e-9)


def test_range_rate_formula():
    g = geometry()
    x = 0.3
    h = 1e-6
    fd = (math.hypot(x + h + 0.025, g.reflector_y) - math.hypot(x - h + 0.025, g.reflector_y)) / (2 * h)
    assert float(range_rate(x, g.rx0_pos, g)) == pytest.approx(fd, rel=1e-8)


def test_midpoint_value_and_sign():
    g = geometry()
    assert g.crossing_range == pytest.approx(0.77, abs=1e-6)
    dnu = midpoint_differential_doppler(g)
    assert dnu == pytest.approx(0.05 / (LAMBDA * 0.77), rel=1e-6)
    assert dnu > 0
    assert float(differential_doppler(1.0, g)) == pytest.approx(dnu, rel=1e-12)
    assert midpoint_differential_doppler(g, velocity=-1.0) == pytest.approx(-dnu)
    assert velocity_from_midpoint(dnu, g) == pytest.approx(1.0)


def test_midpoint_is_extremum_and_even():
    g = geometry()
    t = np.linspace(0.0, 2.0, 20001)
    d = differential_doppler(t, g)
    assert t[np.argmax(np.abs(d))] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(d, d[::-1], rtol=1e-12, atol=1e-15)


def test_direction_reverses_sign():
    g = geometry()
    back = replace(g, reflector_x0=1.0, velocity_x=-1.0)
    t = np.linspace(0.0, 2.0, 101)
    np.testing.assert_allclose(differential_doppler(t, back), -differential_doppler(t, g), rtol=1e-12)


def test_transmitter_term_cancels():
    t = np.linspace(0, 2, 11)
    a = differential_doppler(t, geometry(tx_pos=(2.0, -30.0)))
    b = differential_doppler(t, geometry())
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_legs_and_crossings():
    base = indoor_geometry()
    g, duration = back_and_forth(base, 0.30, [0.1, 0.2], pause=1.0, lead_in=0.5)
    assert duration == pytest.approx(0.5 + 3.0 + 1.0 + 1.5 + 1.0)
    (t1, v1), (t2, v2) = g.crossings()
    assert (t1, v1) == (pytest.approx(2.0), 0.1)
    assert (t2, v2) == (pytest.approx(4.5 + 0.75), -0.2)
    assert float(g.position(t1)) == pytest.approx(g.x_c)
    assert float(g.velocity(0.2)) == 0.0
    assert float(g.velocity(4.0)) == 0.0


def test_geometry_validation():
    with pytest.raises(ValueError):
        geometry(rx1_pos=(0.025, 0.1))
    with pytest.raises(ValueError):
        geometry(reflector_y=0.0)
    with pytest.raises(ValueError):
        geometry(legs=(Leg(0, 2, 1.0), Leg(1, 1, 1.0)))
    with pytest.raises(ValueError):
        PathComponent(1.0, -1e-9)
    with pytest.raises(ValueError):
        StaticChannel((PathComponent(1.0, 0.0, doppler=1.0),))


def simple_config(**kw):
    g = indoor_geometry()
    base = dict(geometry=g, sample_interval=1e-3, duration=3.0, subcarriers=16,
                dynamic_amp0=0.8 * np.exp(0.4j), dynamic_amp1=1.1 * np.exp(-1.2j))
    base.update(kw)
    return SimulationConfig(**base)


def test_phase_equals_integrated_differential_doppler():
    cfg = simple_config()
    rx0, rx1, truth = synthesize_pair(cfg)
    z = np.sum(rx1.values * np.conj(rx0.values), axis=1)
    phi = np.unwrap(np.angle(z))
    phi -= phi[0]
    for n in range(0, cfg.n_samples, 250):
        want = 2 * np.pi * quad(lambda s: float(differential_doppler(s, cfg.geometry)), 0.0, truth.times[n],
                                epsabs=1e-13, epsrel=1e-13, limit=200)[0]
        assert abs(phi[n] - want) < 1e-9


def test_doppler_phase_matches_path_length():
    cfg = simple_config(subcarriers=1)
    rx0, _, truth = synthesize_pair(cfg)
    l0, _ = path_lengths(truth.times, cfg.geometry)
    psi = np.unwrap(np.angle(rx0.values[:, 0] / cfg.dynamic_amp0))
    np.testing.assert_allclose(psi - psi[0], -2 * np.pi * (l0 - l0[0]) / cfg.geometry.wavelength, atol=1e-9)
    assert cfg.geometry.center_freq == pytest.approx(SPEED_OF_LIGHT / cfg.geometry.wavelength)


def test_static_scene_has_no_doppler():
    g = replace(indoor_geometry(), velocity_x=0.0)
    static = StaticChannel((PathComponent(0.3 + 0.1j, 4e-7),))
    rx0, rx1, truth = synthesize_pair(simple_config(geometry=g, static0=static, static1=static))
    assert np.all(truth.dnu == 0)
    assert truth.crossings == ()
    np.testing.assert_allclose(rx0.values, np.broadcast_to(rx0.values[:1], rx0.values.shape), atol=1e-15)


def test_common_impairment_cancels_in_product():
    clean = simple_config(static0=StaticChannel((PathComponent(0.2, 3e-7),)))
    dirty = replace(clean, impairment=ImpairmentModel(phase_step_std=0.05, seed=7))
    a0, a1, _ = synthesize_pair(clean)
    b0, b1, _ = synthesize_pair(dirty)
    assert not np.allclose(a0.values, b0.values)
    np.testing.assert_allclose(b1.values * np.conj(b0.values), a1.values * np.conj(a0.values), atol=1e-12)
    indep = replace(dirty, impairment=ImpairmentModel(phase_step_std=0.05, seed=7, common=False))
    c0, c1, _ = synthesize_pair(indep)
    assert np.max(np.abs(c1.values * np.conj(c0.values) - a1.values * np.conj(a0.values))) > 0.1


def test_impairment_is_unit_modulus():
    for kind in ("unit_modulus_random_walk", "constant_phase", "none"):
        c = ImpairmentModel(kind=kind).realize(50, 8, np.random.default_rng(0))
        np.testing.assert_allclose(np.abs(c), 1.0, rtol=1e-12)


def test_deterministic_under_seed():
    cfg = reference_config([0.1], seed=4, noise_std=0.1, subcarriers=8, sample_interval=0.01)
    a = synthesize_pair(cfg)
    b = synthesize_pair(reference_config([0.1], seed=4, noise_std=0.1, subcarriers=8, sample_interval=0.01))
    assert np.array_equal(a[0].values, b[0].values)
    assert np.array_equal(a[1].values, b[1].values)
    c = synthesize_pair(reference_config([0.1], seed=5, noise_std=0.1, subcarriers=8, sample_interval=0.01))
    assert not np.array_equal(a[0].values, c[0].values)


def test_noise_level():
    cfg = simple_config(noise=NoiseModel(0.2, seed=3), dynamic_amp0=0.0, dynamic_amp1=0.0)
    rx0, _, _ = synthesize_pair(cfg)
    assert np.std(rx0.values.real) == pytest.approx(0.2, rel=0.02)


def test_emitted_log_round_trips_to_series():
    cfg = simple_config(duration=0.05)
    rx0, rx1, _ = synthesize_pair(cfg)
    cap = parse_capture(format_capture(emit_capture(rx0, rx1, RecordTemplate())))
    for key, rx in (((0, 0), rx0), ((0, 1), rx1)):
        s = capture_to_series(cap, *key)
        np.testing.assert_allclose(s.times, rx.times, atol=1e-9)
        np.testing.assert_allclose(s.freqs, rx.freqs, rtol=1e-12)
        np.testing.assert_allclose(s.values, rx.values, rtol=0, atol=math.sqrt(2) * 5e-7 + 1e-12)


def test_emit_groups_on_symbol_grid():
    t_sym = 1e-3 / 14
    cfg = simple_config(sample_interval=2 * t_sym, duration=27 * t_sym)
    rx0, rx1, _ = synthesize_pair(cfg)
    cap = emit_capture(rx0, rx1, RecordTemplate(block_stride=2))
    assert len(cap.blocks) == 2
    assert cap.blocks[0].port_data[(0, 0)].ofdm_block_indices == tuple(range(0, 14, 2))
    s = capture_to_series(parse_capture(format_capture(cap)), 0, 1)
    np.testing.assert_allclose(s.times, rx1.times, atol=1e-6)


def test_truth_csv_header():
    _, _, truth = synthesize_pair(simple_config(duration=0.002))
    buf = io.StringIO()
    write_truth_csv(truth, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t_s,nu0_hz,nu1_hz,dnu_hz"
    assert len(lines) == 1 + len(truth.times)


def test_reference_speeds_in_mm_per_min():
    assert 6000 * MMPM == pytest.approx(0.1)
    cfg = reference_config([2000 * MMPM, 10000 * MMPM], subcarriers=4, sample_interval=0.01)
    speeds = [abs(v) for _, v in cfg.geometry.crossings()]
    assert speeds == pytest.approx([2000 / 60000, 10000 / 60000])
