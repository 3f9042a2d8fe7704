"""Differential Doppler extraction from a pair of receiver series.

Stages, in order: conjugate product rx1 * conj(rx0), per-sample normalization,
subcarrier averaging, phase unwrapping, background subtraction,
Savitzky-Golay smoothing and phase differentiation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .channel import DEFAULT_WAVELENGTH
from .csilog import RxSeries, fmt_number

TWO_PI = 2.0 * np.pi


class AxisMismatchError(ValueError):
    pass


class PipelineError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompositeSeries:
    times: np.ndarray
    freqs: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class BackgroundSpec:
    """How the static phase profile is obtained.

    ``window`` averages phi_raw over a static interval given in seconds
    (``start_s``/``end_s``, end exclusive) or samples (``start``/``end``).
    ``moving_average`` subtracts a centred running mean of ``length`` samples.
    ``external`` subtracts ``profile`` (one value, or one per sample).
    ``none`` leaves the phase untouched.
    """

    mode: str = "window"
    start_s: float | None = 0.0
    end_s: float | None = 0.5
    start: int | None = None
    end: int | None = None
    length: int = 1001
    profile: tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("window", "moving_average", "external", "none"):
            raise ValueError(f"unknown background mode {self.mode!r}")


@dataclass(frozen=True)
class PipelineConfig:
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    sg_window: int = 31
    sg_order: int = 3
    sg_edge: str = "interp"
    wavelength: float = DEFAULT_WAVELENGTH
    zero_magnitude_epsilon: float = 1e-12

    def __post_init__(self):
        if self.sg_window % 2 != 1 or self.sg_window <= self.sg_order:
            raise ValueError("sg_window must be odd and larger than sg_order")
        if self.sg_order < 0:
            raise ValueError("sg_order must be >= 0")
        if self.sg_edge not in ("interp", "mirror"):
            raise ValueError("sg_edge must be 'interp' or 'mirror'")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not self.zero_magnitude_epsilon > 0:
            raise ValueError("zero_magnitude_epsilon must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"]["profile"] = list(d["background"]["profile"])
        return d


@dataclass(frozen=True, eq=False)
class PhaseTrace:
    times: np.ndarray
    phi_raw: np.ndarray
    phi: np.ndarray
    phi_sg: np.ndarray
    background: np.ndarray


@dataclass(frozen=True, eq=False)
class DopplerTrace:
    times: np.ndarray
    dnu_hz: np.ndarray
    v_delta: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


# ---------------------------------------------------------------------------
# stages


def cross_multiply(rx1: RxSeries, rx0: RxSeries, rtol: float = 1e-12) -> CompositeSeries:
    """rx1 * conj(rx0) on a shared time/frequency grid."""
    if rx1.values.shape != rx0.values.shape:
        raise AxisMismatchError(f"axis mismatch: shape {rx1.values.shape} vs {rx0.values.shape}")
    for name, a, b in (("time", rx1.times, rx0.times), ("frequency", rx1.freqs, rx0.freqs)):
        scale = max(float(np.max(np.abs(a), initial=0.0)), 1e-300)
        if len(a) and np.max(np.abs(a - b)) > rtol * scale:
            raise AxisMismatchError(f"axis mismatch: {name} axes differ")
    return CompositeSeries(rx1.times.copy(), rx1.freqs.copy(), rx1.values * np.conj(rx0.values))


def normalize(comp: CompositeSeries, epsilon: float = 1e-12) -> tuple[CompositeSeries, list[tuple[int, int]]]:
    """Scale every sample to unit modulus.

    Samples with magnitude below ``epsilon`` take the previous unit value in
    time on the same subcarrier ((1, 0) on the first row) and are returned in
    the flag list as (time index, subcarrier index).
    """
    values = comp.values
    mag = np.abs(values)
    degenerate = mag < epsilon
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(degenerate, 0.0, values / np.where(degenerate, 1.0, mag))
    flags = []
    if degenerate.any():
        for n, k in zip(*np.nonzero(degenerate)):
            u[n, k] = u[n - 1, k] if n > 0 else 1.0
            flags.append((int(n), int(k)))
    return CompositeSeries(comp.times, comp.freqs, u), flags


def subcarrier_average(u: CompositeSeries) -> np.ndarray:
    if u.values.shape[1] < 1:
        raise PipelineError("no subcarriers to average")
    return u.values.mean(axis=1)


def unwrap_phase(zbar) -> np.ndarray:
    """Continuous phase of a complex sequence.

    Starts at the principal angle of the first sample; each step is mapped
    into (-pi, pi].
    """
    angles = np.angle(np.asarray(zbar))
    if angles.size == 0:
        raise PipelineError("cannot unwrap an empty sequence")
    steps = np.diff(angles)
    # map to (-pi, pi]
    wrapped = steps - TWO_PI * np.ceil((steps - np.pi) / TWO_PI)
    out = np.empty_like(angles)
    out[0] = angles[0]
    out[1:] = angles[0] + np.cumsum(wrapped)
    return out


def window_indices(times: np.ndarray, bg: BackgroundSpec) -> tuple[int, int]:
    n = len(times)
    if bg.start is not None or bg.end is not None:
        lo = 0 if bg.start is None else bg.start
        hi = n if bg.end is None else bg.end
    else:
        lo = int(np.searchsorted(times, bg.start_s if bg.start_s is not None else times[0]))
        hi = n if bg.end_s is None else int(np.searchsorted(times, bg.end_s))
    return lo, hi


def estimate_background(phi_raw: np.ndarray, window: tuple[int, int]) -> float:
    """Mean of ``phi_raw[start:end]``: a constant static-phase estimate."""
    lo, hi = window
    if lo < 0 or hi > len(phi_raw) or hi <= lo:
        raise PipelineError(f"empty or out-of-range background window [{lo}, {hi})")
    return float(np.mean(phi_raw[lo:hi]))


def moving_average(x: np.ndarray, length: int) -> np.ndarray:
    length = max(1, min(int(length), len(x)))
    if length % 2 == 0:
        length -= 1
    half = length // 2
    padded = np.pad(x, half, mode="edge")
    kernel = np.ones(length) / length
    return np.convolve(padded, kernel, mode="valid")


def background_profile(phi_raw: np.ndarray, times: np.ndarray, bg: BackgroundSpec) -> np.ndarray:
    if bg.mode == "none":
        return np.zeros_like(phi_raw)
    if bg.mode == "window":
        return np.full_like(phi_raw, estimate_background(phi_raw, window_indices(times, bg)))
    if bg.mode == "moving_average":
        return moving_average(phi_raw, bg.length)
    prof = np.asarray(bg.profile, dtype=float)
    if prof.size == 1:
        return np.full_like(phi_raw, prof[0])
    if prof.shape != phi_raw.shape:
        raise PipelineError(f"external background has {prof.size} values, trace has {phi_raw.size}")
    return prof


def savgol_coefficients(window: int, order: int) -> np.ndarray:
    """Weights that evaluate the least-squares polynomial at the window centre."""
    half = window // 2
    # abscissae scaled to [-1, 1] keep the Vandermonde system well conditioned
    x = np.arange(-half, half + 1, dtype=float) / max(half, 1)
    vander = np.vander(x, order + 1, increasing=True)
    # first row of the pseudo-inverse gives the fitted constant term
    return np.linalg.pinv(vander)[0]


def savitzky_golay(phi, window: int, order: int, edge: str = "interp") -> np.ndarray:
    """Sliding local least-squares polynomial smoother.

    ``edge="interp"`` fits one polynomial to the first (last) ``window``
    samples and evaluates it at the edge positions, so polynomials of degree
    <= order pass through unchanged everywhere. ``edge="mirror"`` reflects the
    signal about the end samples instead.
    """
    phi = np.asarray(phi, dtype=float)
    if window % 2 != 1 or window < 1:
        raise ValueError("window must be a positive odd integer")
    if order < 0 or order >= window:
        raise ValueError("order must satisfy 0 <= order < window")
    if len(phi) < window:
        raise ValueError(f"need at least {window} samples, got {len(phi)}")
    half = window // 2
    coeffs = savgol_coefficients(window, order)
    if edge == "mirror":
        padded = np.concatenate([phi[half:0:-1], phi, phi[-2:-half - 2:-1]])
        return np.correlate(padded, coeffs, mode="valid")
    if edge != "interp":
        raise ValueError("edge must be 'interp' or 'mirror'")
    out = np.correlate(phi, coeffs, mode="valid")
    x = np.linspace(-1.0, 1.0, window)
    vander = np.vander(x, order + 1, increasing=True)
    pinv = np.linalg.pinv(vander)
    head = vander[:half] @ (pinv @ phi[:window])
    tail = vander[-half:] @ (pinv @ phi[-window:]) if half else np.zeros(0)
    return np.concatenate([head, out, tail])


def derivative(y, t) -> np.ndarray:
    """Three-point derivative on a non-uniform grid, second order everywhere."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    n = len(y)
    if n < 2:
        raise PipelineError("insufficient samples for derivative")
    h = np.diff(t)
    if np.any(h <= 0):
        raise PipelineError("duplicate or decreasing timestamps")
    if n == 2:
        return np.full(2, (y[1] - y[0]) / h[0])
    d = np.empty(n)
    h0, h1 = h[:-1], h[1:]
    d[1:-1] = (-h1 / (h0 * (h0 + h1)) * y[:-2]
               + (h1 - h0) / (h0 * h1) * y[1:-1]
               + h0 / (h1 * (h0 + h1)) * y[2:])
    a, b = h[0], h[1]
    d[0] = -(2 * a + b) / (a * (a + b)) * y[0] + (a + b) / (a * b) * y[1] - a / (b * (a + b)) * y[2]
    a, b = h[-1], h[-2]
    d[-1] = (2 * a + b) / (a * (a + b)) * y[-1] - (a + b) / (a * b) * y[-2] + a / (b * (a + b)) * y[-3]
    return d


def phase_derivative(phi_sg, times, wavelength: float) -> DopplerTrace:
    """Differential Doppler (Hz) and differential speed (m/s) from smoothed phase.

    dnu = (1/2pi) dphi/dt and v_delta = wavelength * dnu.
    """
    rate = derivative(phi_sg, times)
    dnu = rate / TWO_PI
    return DopplerTrace(np.asarray(times, dtype=float), dnu, wavelength * dnu)


@dataclass
class PipelineResult:
    phase: PhaseTrace
    doppler: DopplerTrace
    flags: list[tuple[int, int]]
    zbar: np.ndarray


def run_pipeline(rx1: RxSeries, rx0: RxSeries, cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    n = len(rx1.times)
    if n < 2 or len(rx0.times) < 2:
        raise PipelineError("insufficient samples for derivative")
    comp = cross_multiply(rx1, rx0)
    u, flags = normalize(comp, cfg.zero_magnitude_epsilon)
    zbar = subcarrier_average(u)
    phi_raw = unwrap_phase(zbar)
    bg = background_profile(phi_raw, comp.times, cfg.background)
    phi = phi_raw - bg
    if n < cfg.sg_window:
        raise PipelineError(f"trace has {n} samples, fewer than sg_window={cfg.sg_window}")
    phi_sg = savitzky_golay(phi, cfg.sg_window, cfg.sg_order, cfg.sg_edge)
    doppler = phase_derivative(phi_sg, comp.times, cfg.wavelength)
    phase = PhaseTrace(comp.times, phi_raw, phi, phi_sg, bg)
    return PipelineResult(phase, doppler, flags, zbar)


# ---------------------------------------------------------------------------
# file formats

TRACE_COLUMNS = ("t_s", "phi_raw", "phi", "phi_sg", "dnu_hz", "v_delta_mps")


def write_trace_csv(result: PipelineResult, sink: TextIO) -> None:
    p, d = result.phase, result.doppler
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in zip(p.times, p.phi_raw, p.phi, p.phi_sg, d.dnu_hz, d.v_delta):
        writer.writerow([fmt_number(x) for x in row])


def write_flags_json(flags: Sequence[tuple[int, int]], sink: TextIO) -> None:
    json.dump({"degenerate_samples": [list(f) for f in flags], "count": len(flags)}, sink, indent=2)
    sink.write("\n")


def read_trace_csv(source: TextIO) -> DopplerTrace:
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None:
        raise ValueError("empty trace file")
    header = [h.strip() for h in header]
    try:
        it = header.index("t_s")
        iv = header.index("v_delta_mps")
    except ValueError:
        raise ValueError(f"trace header must contain t_s and v_delta_mps, got {header}") from None
    idn = header.index("dnu_hz") if "dnu_hz" in header else None
    t, v, dnu = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            t.append(float(row[it]))
            v.append(float(row[iv]))
            dnu.append(float(row[idn]) if idn is not None else np.nan)
        except (ValueError, IndexError):
            raise ValueError(f"trace line {lineno}: malformed row {row}") from None
    return DopplerTrace(np.array(t), np.array(dnu), np.array(v))
