"""Bistatic dual-receiver channel model and CSI synthesis.

Geometry is planar. Both receivers sit on the line ``y = y_rx``; a single
reflector moves along ``y = reflector_y`` with piecewise-constant velocity.
The transmitter is either far away (its range rate is a constant shared by
both receivers) or at an explicit position.

Per receiver j the synthesized CSI is

    H_j[n, k] = C[n, k] * (H_s,j(f_k) + a_j exp(i psi_j(t_n)) exp(-i 2 pi (f_k - f_c) tau_j(t_n)))
                + noise

where ``psi_j`` is the Doppler phase, i.e. 2 pi times the time integral of the
Doppler frequency ``nu_j``, evaluated in closed form from path lengths, and
``tau_j`` is the instantaneous echo delay. Delay phases are referenced to the
band centre: the carrier part of the delay phase is exactly what ``psi_j``
accumulates, so counting it twice would double the Doppler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .csilog import (
    LTE_SUBCARRIER_SPACING,
    LTE_SYMBOL_DURATION,
    CellParameters,
    CsiBlock,
    CsiCapture,
    PortData,
    RxSeries,
    fmt_number,
    subcarrier_frequencies,
)

SPEED_OF_LIGHT = 299_792_458.0
MMPM = 1.0 / 60_000.0  # 1 mm/min in m/s


@dataclass(frozen=True)
class PathComponent:
    amplitude: complex
    delay: float
    doppler: float = 0.0

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("path delay must be >= 0")
        if not np.isfinite(self.amplitude):
            raise ValueError("path amplitude must be finite")


@dataclass(frozen=True)
class StaticChannel:
    paths: tuple[PathComponent, ...] = ()

    def __post_init__(self):
        if any(p.doppler != 0.0 for p in self.paths):
            raise ValueError("static paths must have zero Doppler")

    def response(self, freqs: np.ndarray, center_freq: float) -> np.ndarray:
        h = np.zeros(len(freqs), dtype=np.complex128)
        for p in self.paths:
            h += p.amplitude * np.exp(-2j * np.pi * (freqs - center_freq) * p.delay)
        return h


@dataclass(frozen=True)
class Leg:
    """A stretch of constant-velocity motion starting at ``start`` seconds."""

    start: float
    duration: float
    velocity: float


@dataclass(frozen=True)
class ScenarioGeometry:
    """Receivers, reflector track and wavelength (all SI).

    With ``legs`` empty the reflector moves as ``reflector_x0 + velocity_x * t``
    for all t. Otherwise it rests at ``reflector_x0`` outside the legs and moves
    with each leg's velocity during it.
    """

    rx0_pos: tuple[float, float]
    rx1_pos: tuple[float, float]
    reflector_y: float
    reflector_x0: float
    velocity_x: float
    wavelength: float
    tx_pos: tuple[float, float] | None = None
    tx_range_rate: float = 0.0
    legs: tuple[Leg, ...] = ()

    def __post_init__(self):
        if self.rx0_pos[1] != self.rx1_pos[1]:
            raise ValueError("receivers must share the same y coordinate")
        if self.rx0_pos == self.rx1_pos:
            raise ValueError("receiver positions must differ")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if self.reflector_y == self.y_rx:
            raise ValueError("reflector line must not pass through the receivers")
        ends = sorted((leg.start, leg.start + leg.duration) for leg in self.legs)
        for (a0, a1), (b0, _) in zip(ends, ends[1:]):
            if b0 < a1:
                raise ValueError("motion legs overlap")
        if any(leg.duration < 0 for leg in self.legs):
            raise ValueError("leg duration must be >= 0")

    @property
    def y_rx(self) -> float:
        return self.rx0_pos[1]

    @property
    def x_c(self) -> float:
        return 0.5 * (self.rx0_pos[0] + self.rx1_pos[0])

    @property
    def half_separation(self) -> float:
        """x_c - x_0 (signed)."""
        return self.x_c - self.rx0_pos[0]

    @property
    def crossing_range(self) -> float:
        """R_m: reflector-to-receiver range when the reflector is at x_c."""
        return math.hypot(self.half_separation, self.reflector_y - self.y_rx)

    @property
    def center_freq(self) -> float:
        return SPEED_OF_LIGHT / self.wavelength

    def rx(self, j: int) -> tuple[float, float]:
        if j == 0:
            return self.rx0_pos
        if j == 1:
            return self.rx1_pos
        raise ValueError(f"receiver index must be 0 or 1, got {j}")

    def position(self, t):
        t = np.asarray(t, dtype=float)
        if not self.legs:
            return self.reflector_x0 + self.velocity_x * t
        x = np.full_like(t, self.reflector_x0)
        for leg in self.legs:
            x = x + leg.velocity * np.clip(t - leg.start, 0.0, leg.duration)
        return x

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        if not self.legs:
            return np.full_like(t, self.velocity_x)
        v = np.zeros_like(t)
        for leg in self.legs:
            v = np.where((t >= leg.start) & (t < leg.start + leg.duration), leg.velocity, v)
        return v

    def crossings(self) -> list[tuple[float, float]]:
        """(time, velocity) of every passage through x = x_c."""
        xc = self.x_c
        if not self.legs:
            if self.velocity_x == 0:
                return []
            return [((xc - self.reflector_x0) / self.velocity_x, self.velocity_x)]
        out = []
        x = self.reflector_x0
        for leg in sorted(self.legs, key=lambda g: g.start):
            if leg.velocity != 0:
                dt = (xc - x) / leg.velocity
                if 0.0 <= dt < leg.duration:
                    out.append((leg.start + dt, leg.velocity))
            x += leg.velocity * leg.duration
        return out


def back_and_forth(
    base: ScenarioGeometry,
    travel: float,
    speeds: list[float],
    pause: float = 1.0,
    lead_in: float = 1.0,
) -> tuple[ScenarioGeometry, float]:
    """Linear-positioner style schedule: rest, move ``travel`` m, rest, move back, ...

    The track is centred on the baseline midpoint. Returns the geometry and the
    total duration including a final pause.
    """
    legs = []
    t = lead_in
    sign = 1.0
    for speed in speeds:
        dur = travel / abs(speed)
        legs.append(Leg(t, dur, sign * abs(speed)))
        t += dur + pause
        sign = -sign
    geom = replace(base, reflector_x0=base.x_c - 0.5 * travel, velocity_x=0.0, legs=tuple(legs))
    return geom, t


# ---------------------------------------------------------------------------
# ranges and Doppler


def range_to(reflector_x, rx: tuple[float, float], geometry: ScenarioGeometry):
    """Euclidean distance from the reflector at ``reflector_x`` to point ``rx``."""
    dx = np.asarray(reflector_x, dtype=float) - rx[0]
    return np.hypot(dx, geometry.reflector_y - rx[1])


def range_rate(reflector_x, rx: tuple[float, float], geometry: ScenarioGeometry, velocity=None):
    """d/dt of `range_to` for motion along x: v (x_R - x_j) / R."""
    v = geometry.velocity_x if velocity is None else velocity
    r = range_to(reflector_x, rx, geometry)
    if np.any(r == 0):
        raise ValueError("reflector coincides with the receiver")
    return v * (np.asarray(reflector_x, dtype=float) - rx[0]) / r


def _tx_rate(x, v, geometry: ScenarioGeometry):
    if geometry.tx_pos is None:
        return np.full_like(np.asarray(x, dtype=float), geometry.tx_range_rate)
    return range_rate(x, geometry.tx_pos, geometry, velocity=v)


def doppler_at_rx(t, j: int, geometry: ScenarioGeometry):
    """Doppler shift (Hz) of the reflector echo at receiver j at time t."""
    x = geometry.position(t)
    v = geometry.velocity(t)
    rate = _tx_rate(x, v, geometry) + range_rate(x, geometry.rx(j), geometry, velocity=v)
    return -rate / geometry.wavelength


def differential_doppler(t, geometry: ScenarioGeometry):
    """nu_1(t) - nu_0(t); the transmitter term cancels in the difference."""
    x = geometry.position(t)
    v = geometry.velocity(t)
    d = range_rate(x, geometry.rx1_pos, geometry, velocity=v) - range_rate(
        x, geometry.rx0_pos, geometry, velocity=v
    )
    return -d / geometry.wavelength


def midpoint_differential_doppler(geometry: ScenarioGeometry, velocity: float | None = None) -> float:
    """Closed form of the differential Doppler with the reflector at x_c."""
    v = geometry.velocity_x if velocity is None else velocity
    return v / geometry.wavelength * 2.0 * geometry.half_separation / geometry.crossing_range


def velocity_from_midpoint(dnu: float, geometry: ScenarioGeometry) -> float:
    """Invert `midpoint_differential_doppler` for v_x."""
    return dnu * geometry.wavelength * geometry.crossing_range / (2.0 * geometry.half_separation)


def path_lengths(t, geometry: ScenarioGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Echo path length Tx -> reflector -> Rx_j for both receivers.

    In the far-field case the transmitter leg is ``tx_range_rate * t`` (its
    absolute value is unknown and cancels anyway).
    """
    t = np.asarray(t, dtype=float)
    x = geometry.position(t)
    if geometry.tx_pos is None:
        tx_leg = geometry.tx_range_rate * t
    else:
        tx_leg = range_to(x, geometry.tx_pos, geometry)
    return (tx_leg + range_to(x, geometry.rx0_pos, geometry),
            tx_leg + range_to(x, geometry.rx1_pos, geometry))


# ---------------------------------------------------------------------------
# impairments and noise

IMPAIRMENT_KINDS = ("none", "unit_modulus_random_walk", "constant_phase")


@dataclass(frozen=True)
class ImpairmentModel:
    """Receiver-side multiplicative term C(t, f), unit modulus by construction.

    ``unit_modulus_random_walk`` combines a common phase random walk (CFO and
    phase noise) with a random walk of the phase slope across subcarriers
    (timing / SFO drift). ``common=False`` draws a separate realization for each
    receiver, which breaks the dual-receiver cancellation on purpose.
    """

    kind: str = "unit_modulus_random_walk"
    phase_step_std: float = 0.05
    seed: int = 0
    common: bool = True

    def __post_init__(self):
        if self.kind not in IMPAIRMENT_KINDS:
            raise ValueError(f"impairment kind must be one of {IMPAIRMENT_KINDS}")
        if self.phase_step_std < 0:
            raise ValueError("phase_step_std must be >= 0")

    def realize(self, n_times: int, n_sub: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "none":
            return np.ones((n_times, n_sub), dtype=np.complex128)
        if self.kind == "constant_phase":
            theta = rng.uniform(-np.pi, np.pi)
            return np.full((n_times, n_sub), np.exp(1j * theta))
        common = np.cumsum(rng.normal(0.0, self.phase_step_std, n_times))
        slope = np.cumsum(rng.normal(0.0, self.phase_step_std, n_times))
        k = (np.arange(n_sub) - (n_sub - 1) / 2.0) / max(n_sub, 1)
        return np.exp(1j * (common[:, None] + slope[:, None] * k[None, :]))


@dataclass(frozen=True)
class NoiseModel:
    complex_noise_std: float = 0.0
    seed: int = 1

    def __post_init__(self):
        if self.complex_noise_std < 0:
            raise ValueError("noise std must be >= 0")


@dataclass(frozen=True)
class SimulationConfig:
    geometry: ScenarioGeometry
    static0: StaticChannel = field(default_factory=StaticChannel)
    static1: StaticChannel = field(default_factory=StaticChannel)
    dynamic_amp0: complex = 1.0
    dynamic_amp1: complex = 1.0
    sample_interval: float = 1e-3
    duration: float = 1.0
    subcarriers: int = 64
    subcarrier_spacing: float = 12 * LTE_SUBCARRIER_SPACING
    impairment: ImpairmentModel = field(default_factory=lambda: ImpairmentModel(kind="none"))
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.subcarriers < 1:
            raise ValueError("subcarriers must be >= 1")
        if not self.subcarrier_spacing > 0:
            raise ValueError("subcarrier_spacing must be > 0")

    @property
    def n_samples(self) -> int:
        return int(math.floor(self.duration / self.sample_interval + 1e-9)) + 1


@dataclass(frozen=True, eq=False)
class GroundTruth:
    times: np.ndarray
    nu0: np.ndarray
    nu1: np.ndarray
    dnu: np.ndarray
    crossings: tuple[tuple[float, float], ...]

    @property
    def crossing_time(self) -> float | None:
        return self.crossings[0][0] if self.crossings else None


def synthesize_pair(config: SimulationConfig) -> tuple[RxSeries, RxSeries, GroundTruth]:
    """Generate aligned CSI for both receivers plus the analytic ground truth.

    Deterministic: the impairment and noise generators are seeded from the
    config only.
    """
    g = config.geometry
    t = np.arange(config.n_samples) * config.sample_interval
    fc = g.center_freq
    freqs = subcarrier_frequencies(fc, config.subcarriers, config.subcarrier_spacing)
    df = (freqs - fc)[None, :]

    l0, l1 = path_lengths(t, g)
    series = []
    for j, (length, amp, static) in enumerate(
        ((l0, config.dynamic_amp0, config.static0), (l1, config.dynamic_amp1, config.static1))
    ):
        psi = -2.0 * np.pi * (length - length[0]) / g.wavelength
        tau = length / SPEED_OF_LIGHT
        h = static.response(freqs, fc)[None, :] + amp * np.exp(1j * psi)[:, None] * np.exp(
            -2j * np.pi * df * tau[:, None]
        )
        series.append(h)

    rng_c = np.random.default_rng(config.impairment.seed)
    c0 = config.impairment.realize(len(t), len(freqs), rng_c)
    c1 = c0 if config.impairment.common else config.impairment.realize(len(t), len(freqs), rng_c)
    series[0] = c0 * series[0]
    series[1] = c1 * series[1]

    sigma = config.noise.complex_noise_std
    if sigma > 0:
        rng_n = np.random.default_rng(config.noise.seed)
        for j in range(2):
            w = rng_n.normal(0.0, sigma, (2,) + series[j].shape)
            series[j] = series[j] + (w[0] + 1j * w[1])

    rx0 = RxSeries(times=t, freqs=freqs, values=series[0])
    rx1 = RxSeries(times=t.copy(), freqs=freqs.copy(), values=series[1])
    nu0 = doppler_at_rx(t, 0, g)
    nu1 = doppler_at_rx(t, 1, g)
    truth = GroundTruth(
        times=t,
        nu0=nu0,
        nu1=nu1,
        dnu=differential_doppler(t, g),
        crossings=tuple((tc, v) for tc, v in g.crossings() if 0.0 <= tc <= t[-1]),
    )
    return rx0, rx1, truth


# ---------------------------------------------------------------------------
# log emission


@dataclass(frozen=True)
class RecordTemplate:
    """Record header values used when writing simulated CSI as a log."""

    nof_prb: int = 100
    cp: str = "normal"
    symbol_sz: int = 1536
    useful_re: int = 1200
    offset: int = 0
    ofdm_symbols: int = 14
    block_stride: int = 1
    snr: float = 30.0
    rsrp: float = 60.0
    start_timestamp_us: int = 1_700_000_000_000_000
    symbol_duration: float = LTE_SYMBOL_DURATION
    base_subcarrier_spacing: float = LTE_SUBCARRIER_SPACING


def emit_capture(rx0: RxSeries, rx1: RxSeries, template: RecordTemplate = RecordTemplate()) -> CsiCapture:
    """Pack a receiver pair into records: rx0 -> (port 0, rx 0), rx1 -> (port 0, rx 1).

    Consecutive samples share a record while they fall on that record's OFDM
    symbol grid (multiples of ``block_stride`` symbols after the record start,
    within ``ofdm_symbols``); otherwise a new record starts. Record timestamps
    are rounded to whole microseconds.
    """
    if rx0.values.shape != rx1.values.shape or not (
        np.array_equal(rx0.times, rx1.times) and np.array_equal(rx0.freqs, rx1.freqs)
    ):
        raise ValueError("receiver series have mismatched axes")
    n, k = rx0.values.shape
    if n == 0:
        return CsiCapture(())
    if k > 1:
        spacing = np.diff(rx0.freqs)
        if not np.allclose(spacing, spacing[0], rtol=1e-9, atol=0):
            raise ValueError("subcarriers are not uniformly spaced")
        ratio = spacing[0] / template.base_subcarrier_spacing
        stride = int(round(ratio))
        if stride < 1 or abs(ratio - stride) > 1e-6:
            raise ValueError(
                f"subcarrier spacing {spacing[0]} Hz is not a multiple of "
                f"{template.base_subcarrier_spacing} Hz"
            )
    else:
        stride = 1
    center = float(np.mean(rx0.freqs))
    cell = CellParameters(
        center_freq_hz=center,
        nof_prb=template.nof_prb,
        cp=template.cp,
        symbol_sz=template.symbol_sz,
        useful_re=template.useful_re,
        offset=template.offset,
        ofdm_symbols=template.ofdm_symbols,
    )

    groups: list[list[tuple[int, int]]] = []
    start_t = 0.0
    for i, t in enumerate(rx0.times):
        if groups:
            m = (t - start_t) / template.symbol_duration
            mi = int(round(m))
            last = groups[-1][-1][1]
            if (abs(m - mi) < 1e-6 and mi % template.block_stride == 0
                    and last < mi < template.ofdm_symbols):
                groups[-1].append((i, mi))
                continue
        groups.append([(i, 0)])
        start_t = t

    blocks = []
    for grp in groups:
        rows = [i for i, _ in grp]
        idx = tuple(m for _, m in grp)
        ts = template.start_timestamp_us + int(round(rx0.times[rows[0]] * 1e6))
        blocks.append(CsiBlock(
            timestamp=ts,
            snr=template.snr,
            rsrp=template.rsrp,
            cell=cell,
            subcarrier_stride=stride,
            block_stride=template.block_stride,
            port_data={
                (0, 0): PortData(idx, rx0.values[rows]),
                (0, 1): PortData(idx, rx1.values[rows]),
            },
        ))
    return CsiCapture(tuple(blocks))


def write_truth_csv(truth: GroundTruth, sink) -> None:
    sink.write("t_s,nu0_hz,nu1_hz,dnu_hz\n")
    for row in zip(truth.times, truth.nu0, truth.nu1, truth.dnu):
        sink.write(",".join(fmt_number(x) for x in row) + "\n")


# ---------------------------------------------------------------------------
# reference scenarios

DEFAULT_WAVELENGTH = SPEED_OF_LIGHT / 2.1e9


def indoor_geometry(
    separation: float = 0.050,
    standoff: float = 0.10,
    wavelength: float = DEFAULT_WAVELENGTH,
) -> ScenarioGeometry:
    """Scaled indoor layout: receivers ``separation`` apart, track ``standoff`` away."""
    return ScenarioGeometry(
        rx0_pos=(-0.5 * separation, 0.0),
        rx1_pos=(0.5 * separation, 0.0),
        reflector_y=standoff,
        reflector_x0=-0.15,
        velocity_x=6000 * MMPM,
        wavelength=wavelength,
    )


def random_static(rng: np.random.Generator, n_paths: int, total_amplitude: float,
                  delay_range: tuple[float, float] = (0.2e-6, 1.0e-6)) -> tuple[StaticChannel, StaticChannel]:
    """Static clutter seen by both receivers: shared delays, receiver-specific phases."""
    if n_paths == 0 or total_amplitude == 0:
        return StaticChannel(), StaticChannel()
    delays = rng.uniform(*delay_range, n_paths)
    mags = rng.rayleigh(1.0, n_paths)
    mags *= total_amplitude / np.sqrt(np.sum(mags**2))
    chans = []
    for _ in range(2):
        phases = rng.uniform(-np.pi, np.pi, n_paths)
        chans.append(StaticChannel(tuple(
            PathComponent(complex(m * np.exp(1j * p)), float(d)) for m, p, d in zip(mags, phases, delays)
        )))
    return chans[0], chans[1]


def reference_config(
    speeds_mps: list[float] = (6000 * MMPM,),
    static_amplitude: float = 0.1,
    static_paths: int = 4,
    seed: int = 0,
    noise_std: float = 0.0,
    impairment: ImpairmentModel | None = None,
    sample_interval: float = 1e-3,
    subcarriers: int = 100,
    travel: float = 0.30,
    pause: float | None = None,
    standoff: float = 0.10,
) -> SimulationConfig:
    """Back-and-forth passes over a 0.30 m track past a 0.05 m baseline.

    One pass per entry in ``speeds_mps``; directions alternate. The reflector
    rests ``pause`` seconds before the first pass, between passes and after the
    last one, so the first second is a static window for background estimation.
    The default rest is one pass duration at the slowest speed (at least 1 s),
    which keeps motion to about a third of the trace; a robust detection
    threshold needs most samples to be motion-free.
    """
    if pause is None:
        pause = max(1.0, travel / min(abs(v) for v in speeds_mps))
    rng = np.random.default_rng(seed)
    geom, duration = back_and_forth(indoor_geometry(standoff=standoff), travel, list(speeds_mps),
                                    pause=pause, lead_in=pause)
    s0, s1 = random_static(rng, static_paths, static_amplitude)
    a0 = complex(np.exp(1j * rng.uniform(-np.pi, np.pi)))
    a1 = complex(np.exp(1j * rng.uniform(-np.pi, np.pi)))
    return SimulationConfig(
        geometry=geom,
        static0=s0,
        static1=s1,
        dynamic_amp0=a0,
        dynamic_amp1=a1,
        sample_interval=sample_interval,
        duration=duration,
        subcarriers=subcarriers,
        subcarrier_spacing=12 * LTE_SUBCARRIER_SPACING,
        impairment=impairment if impairment is not None else ImpairmentModel(kind="none"),
        noise=NoiseModel(noise_std, seed=seed + 1),
    )
