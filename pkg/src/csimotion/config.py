"""JSON configuration loading with field-path error messages.

Every loader takes a plain ``dict`` (as produced by ``json.load``) and returns
the corresponding frozen dataclass. Problems raise ``ConfigError`` naming the
offending field, e.g. ``geometry.legs[2].velocity: expected a number``.
Speeds may be written as a number in m/s or as ``{"value": 6000, "unit":
"mm/min"}``; complex amplitudes as a number or ``[re, im]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from .channel import (
    MMPM,
    ImpairmentModel,
    Leg,
    NoiseModel,
    PathComponent,
    RecordTemplate,
    ScenarioGeometry,
    SimulationConfig,
    StaticChannel,
    SPEED_OF_LIGHT,
    back_and_forth,
    reference_config,
)
from .detect import BaselineGeometry, DetectorConfig
from .pipeline import BackgroundSpec, PipelineConfig

SPEED_UNITS = {"m/s": 1.0, "mps": 1.0, "mm/min": MMPM, "mmpm": MMPM, "km/h": 1.0 / 3.6}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _join(path: str, key: str | int) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else key


class _Fields:
    """Typed accessor over one JSON object that reports full field paths."""

    def __init__(self, data: Any, path: str, allowed: tuple[str, ...]):
        if not isinstance(data, dict):
            raise ConfigError(path, "expected an object")
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            raise ConfigError(_join(path, unknown[0]), "unknown field")
        self.data = data
        self.path = path

    def at(self, key: str) -> str:
        return _join(self.path, key)

    def has(self, key: str) -> bool:
        return self.data.get(key) is not None

    def raw(self, key: str, default: Any = None) -> Any:
        return self.data.get(key, default)

    def number(self, key: str, default: Any = ...) -> float:
        if key not in self.data:
            if default is ...:
                raise ConfigError(self.at(key), "required field missing")
            return default
        return _number(self.data[key], self.at(key))

    def integer(self, key: str, default: Any = ...) -> int:
        if key not in self.data:
            if default is ...:
                raise ConfigError(self.at(key), "required field missing")
            return default
        v = self.data[key]
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(self.at(key), "expected an integer")
        return v

    def string(self, key: str, default: Any = ...) -> str:
        if key not in self.data:
            if default is ...:
                raise ConfigError(self.at(key), "required field missing")
            return default
        v = self.data[key]
        if not isinstance(v, str):
            raise ConfigError(self.at(key), "expected a string")
        return v

    def boolean(self, key: str, default: bool) -> bool:
        v = self.data.get(key, default)
        if not isinstance(v, bool):
            raise ConfigError(self.at(key), "expected true or false")
        return v

    def items(self, key: str) -> list:
        v = self.data.get(key, [])
        if not isinstance(v, list):
            raise ConfigError(self.at(key), "expected a list")
        return v


def _number(v: Any, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, "expected a number")
    return float(v)


def _point(v: Any, path: str) -> tuple[float, float]:
    if not isinstance(v, list) or len(v) != 2:
        raise ConfigError(path, "expected [x, y]")
    return (_number(v[0], _join(path, 0)), _number(v[1], _join(path, 1)))


def _complex(v: Any, path: str) -> complex:
    if isinstance(v, list):
        if len(v) != 2:
            raise ConfigError(path, "expected a number or [re, im]")
        return complex(_number(v[0], _join(path, 0)), _number(v[1], _join(path, 1)))
    return complex(_number(v, path))


def speed_value(v: Any, path: str) -> float:
    """A speed in m/s, from a number or ``{"value": ..., "unit": ...}``."""
    if isinstance(v, dict):
        f = _Fields(v, path, ("value", "unit"))
        unit = f.string("unit", "m/s")
        if unit not in SPEED_UNITS:
            raise ConfigError(f.at("unit"), f"unknown unit {unit!r}; use one of {sorted(SPEED_UNITS)}")
        return f.number("value") * SPEED_UNITS[unit]
    return _number(v, path)


def _build(path: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


# ---------------------------------------------------------------------------
# simulation

_GEOMETRY_FIELDS = ("rx0", "rx1", "reflector_y", "reflector_x0", "velocity", "wavelength",
                    "center_freq_hz", "tx_pos", "tx_range_rate", "legs", "back_and_forth")
_SIM_FIELDS = ("seed", "reference", "geometry", "static0", "static1", "dynamic_amp0", "dynamic_amp1",
               "sample_interval", "duration", "subcarriers", "subcarrier_spacing", "impairment",
               "noise", "record")
_REFERENCE_FIELDS = ("speeds", "static_amplitude", "static_paths", "noise_std", "sample_interval",
                     "subcarriers", "travel", "pause", "standoff", "impairment")


def _wavelength(f: _Fields) -> float:
    if f.has("wavelength") and f.has("center_freq_hz"):
        raise ConfigError(f.at("wavelength"), "give wavelength or center_freq_hz, not both")
    if f.has("center_freq_hz"):
        fc = f.number("center_freq_hz")
        if not fc > 0:
            raise ConfigError(f.at("center_freq_hz"), "must be > 0")
        return SPEED_OF_LIGHT / fc
    return f.number("wavelength", SPEED_OF_LIGHT / 2.1e9)


def geometry_from_dict(d: Any, path: str = "geometry") -> tuple[ScenarioGeometry, float | None]:
    """Geometry plus the schedule duration when ``back_and_forth`` is used."""
    f = _Fields(d, path, _GEOMETRY_FIELDS)
    legs = []
    for i, item in enumerate(f.items("legs")):
        lp = _join(f.at("legs"), i)
        lf = _Fields(item, lp, ("start", "duration", "velocity"))
        legs.append(Leg(lf.number("start"), lf.number("duration"), speed_value(lf.raw("velocity"), lf.at("velocity"))))
    geom = _build(
        path,
        ScenarioGeometry,
        rx0_pos=_point(f.raw("rx0"), f.at("rx0")) if "rx0" in f.data else (-0.025, 0.0),
        rx1_pos=_point(f.raw("rx1"), f.at("rx1")) if "rx1" in f.data else (0.025, 0.0),
        reflector_y=f.number("reflector_y", 0.10),
        reflector_x0=f.number("reflector_x0", -0.15),
        velocity_x=speed_value(f.raw("velocity"), f.at("velocity")) if "velocity" in f.data else 0.1,
        wavelength=_wavelength(f),
        tx_pos=_point(f.raw("tx_pos"), f.at("tx_pos")) if f.has("tx_pos") else None,
        tx_range_rate=f.number("tx_range_rate", 0.0),
        legs=tuple(legs),
    )
    if not f.has("back_and_forth"):
        return geom, None
    if legs:
        raise ConfigError(f.at("back_and_forth"), "cannot be combined with legs")
    bf = _Fields(f.raw("back_and_forth"), f.at("back_and_forth"), ("travel", "speeds", "pause", "lead_in"))
    speeds = [speed_value(s, _join(bf.at("speeds"), i)) for i, s in enumerate(bf.items("speeds"))]
    if not speeds or any(s == 0 for s in speeds):
        raise ConfigError(bf.at("speeds"), "expected a non-empty list of non-zero speeds")
    return back_and_forth(geom, bf.number("travel", 0.30), speeds,
                          pause=bf.number("pause", 1.0), lead_in=bf.number("lead_in", 1.0))


def _static(items: Any, path: str) -> StaticChannel:
    if not isinstance(items, list):
        raise ConfigError(path, "expected a list of paths")
    paths = []
    for i, item in enumerate(items):
        p = _join(path, i)
        f = _Fields(item, p, ("amplitude", "delay"))
        paths.append(_build(p, PathComponent, amplitude=_complex(f.raw("amplitude", 0.0), f.at("amplitude")),
                            delay=f.number("delay")))
    return StaticChannel(tuple(paths))


def impairment_from_dict(d: Any, path: str = "impairment", seed: int = 0) -> ImpairmentModel:
    f = _Fields(d, path, ("kind", "phase_step_std", "seed", "common"))
    return _build(path, ImpairmentModel, kind=f.string("kind", "unit_modulus_random_walk"),
                  phase_step_std=f.number("phase_step_std", 0.05), seed=f.integer("seed", seed),
                  common=f.boolean("common", True))


def record_from_dict(d: Any, path: str = "record") -> RecordTemplate:
    names = tuple(fl.name for fl in fields(RecordTemplate))
    f = _Fields(d, path, names)
    defaults = RecordTemplate()
    kwargs = {}
    for name in names:
        if name not in f.data:
            continue
        default = getattr(defaults, name)
        if isinstance(default, str):
            kwargs[name] = f.string(name)
        elif isinstance(default, int):
            kwargs[name] = f.integer(name)
        else:
            kwargs[name] = f.number(name)
    return _build(path, RecordTemplate, **kwargs)


@dataclass(frozen=True)
class Scenario:
    simulation: SimulationConfig
    record: RecordTemplate
    seed: int


def scenario_from_dict(d: Any, seed: int | None = None) -> Scenario:
    """Resolve a simulate-command scenario.

    ``reference`` builds the indoor back-and-forth schedule from a few knobs;
    otherwise ``geometry`` and the remaining fields describe the run exactly.
    With neither present the reference schedule is used with its defaults.
    An explicit ``seed`` argument overrides the file's ``seed``; noise and
    impairment draws default to ``seed + 1`` and ``seed + 2``.
    """
    f = _Fields(d, "", _SIM_FIELDS)
    if not f.has("geometry") and not f.has("reference"):
        d = {**d, "reference": {}}
        f = _Fields(d, "", _SIM_FIELDS)
    if seed is None:
        seed = f.integer("seed", 0)
    record = record_from_dict(f.raw("record"), "record") if f.has("record") else RecordTemplate()

    if f.has("reference"):
        extra = sorted(k for k in d if k not in ("seed", "reference", "record"))
        if extra:
            raise ConfigError(extra[0], "not allowed together with reference")
        r = _Fields(f.raw("reference"), "reference", _REFERENCE_FIELDS)
        speeds = [speed_value(s, _join(r.at("speeds"), i)) for i, s in enumerate(r.items("speeds"))]
        if "speeds" not in r.data:
            speeds = [6000 * MMPM]
        if not speeds or any(s == 0 for s in speeds):
            raise ConfigError(r.at("speeds"), "expected a non-empty list of non-zero speeds")
        imp = impairment_from_dict(r.raw("impairment"), r.at("impairment"), seed + 2) if r.has("impairment") else None
        sim = _build("reference", reference_config,
                     speeds_mps=speeds,
                     static_amplitude=r.number("static_amplitude", 0.1),
                     static_paths=r.integer("static_paths", 4),
                     seed=seed,
                     noise_std=r.number("noise_std", 0.0),
                     impairment=imp,
                     sample_interval=r.number("sample_interval", 1e-3),
                     subcarriers=r.integer("subcarriers", 100),
                     travel=r.number("travel", 0.30),
                     pause=r.number("pause", None),
                     standoff=r.number("standoff", 0.10))
        return Scenario(sim, record, seed)

    geom, sched = geometry_from_dict(f.raw("geometry"))
    duration = f.number("duration", sched) if (sched is not None or "duration" in f.data) else None
    if duration is None:
        raise ConfigError("duration", "required field missing")
    noise = NoiseModel(0.0, seed + 1)
    if f.has("noise"):
        nf = _Fields(f.raw("noise"), "noise", ("complex_noise_std", "seed"))
        noise = _build("noise", NoiseModel, complex_noise_std=nf.number("complex_noise_std", 0.0),
                       seed=nf.integer("seed", seed + 1))
    impairment = (impairment_from_dict(f.raw("impairment"), "impairment", seed + 2)
                  if f.has("impairment") else ImpairmentModel(kind="none"))
    sim = _build(
        "",
        SimulationConfig,
        geometry=geom,
        static0=_static(f.raw("static0", []), "static0"),
        static1=_static(f.raw("static1", []), "static1"),
        dynamic_amp0=_complex(f.raw("dynamic_amp0", 1.0), "dynamic_amp0"),
        dynamic_amp1=_complex(f.raw("dynamic_amp1", 1.0), "dynamic_amp1"),
        sample_interval=f.number("sample_interval", 1e-3),
        duration=duration,
        subcarriers=f.integer("subcarriers", 64),
        subcarrier_spacing=f.number("subcarrier_spacing", 180e3),
        impairment=impairment,
        noise=noise,
    )
    return Scenario(sim, record, seed)


def _cplx(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def scenario_to_dict(s: Scenario) -> dict:
    """Fully resolved explicit form; loading it back gives the same scenario."""
    c = s.simulation
    g = c.geometry
    geometry = {
        "rx0": list(g.rx0_pos),
        "rx1": list(g.rx1_pos),
        "reflector_y": g.reflector_y,
        "reflector_x0": g.reflector_x0,
        "velocity": g.velocity_x,
        "wavelength": g.wavelength,
        "tx_pos": list(g.tx_pos) if g.tx_pos is not None else None,
        "tx_range_rate": g.tx_range_rate,
        "legs": [{"start": leg.start, "duration": leg.duration, "velocity": leg.velocity} for leg in g.legs],
    }
    return {
        "seed": s.seed,
        "geometry": geometry,
        "static0": [{"amplitude": _cplx(p.amplitude), "delay": p.delay} for p in c.static0.paths],
        "static1": [{"amplitude": _cplx(p.amplitude), "delay": p.delay} for p in c.static1.paths],
        "dynamic_amp0": _cplx(complex(c.dynamic_amp0)),
        "dynamic_amp1": _cplx(complex(c.dynamic_amp1)),
        "sample_interval": c.sample_interval,
        "duration": c.duration,
        "subcarriers": c.subcarriers,
        "subcarrier_spacing": c.subcarrier_spacing,
        "impairment": asdict(c.impairment),
        "noise": asdict(c.noise),
        "record": asdict(s.record),
    }


# ---------------------------------------------------------------------------
# processing, detection, evaluation

def pipeline_from_dict(d: Any, path: str = "") -> PipelineConfig:
    f = _Fields(d, path, ("background", "sg_window", "sg_order", "sg_edge", "wavelength",
                          "center_freq_hz", "zero_magnitude_epsilon"))
    bg = BackgroundSpec()
    if f.has("background"):
        bp = f.at("background")
        b = _Fields(f.raw("background"), bp, ("mode", "start_s", "end_s", "start", "end", "length", "profile"))
        profile = b.raw("profile", [])
        if not isinstance(profile, list):
            raise ConfigError(b.at("profile"), "expected a list of numbers")
        opt_num = {k: (b.number(k) if b.has(k) else None) for k in ("start_s", "end_s")}
        opt_int = {k: (b.integer(k) if b.has(k) else None) for k in ("start", "end")}
        if "start_s" not in b.data and "start" not in b.data:
            opt_num["start_s"] = 0.0
        if "end_s" not in b.data and "end" not in b.data:
            opt_num["end_s"] = 0.5
        bg = _build(bp, BackgroundSpec, mode=b.string("mode", "window"), length=b.integer("length", 1001),
                    profile=tuple(_number(x, _join(b.at("profile"), i)) for i, x in enumerate(profile)),
                    **opt_num, **opt_int)
    return _build(path, PipelineConfig, background=bg,
                  sg_window=f.integer("sg_window", 31), sg_order=f.integer("sg_order", 3),
                  sg_edge=f.string("sg_edge", "interp"), wavelength=_wavelength(f),
                  zero_magnitude_epsilon=f.number("zero_magnitude_epsilon", 1e-12))


def detector_from_dict(d: Any, path: str = "") -> DetectorConfig:
    f = _Fields(d, path, ("threshold_mode", "v_min", "k", "floor", "min_separation", "release"))
    base = DetectorConfig()
    return _build(path, DetectorConfig,
                  threshold_mode=f.string("threshold_mode", base.threshold_mode),
                  v_min=f.number("v_min", base.v_min), k=f.number("k", base.k),
                  floor=f.number("floor", base.floor),
                  min_separation=f.number("min_separation", base.min_separation),
                  release=f.number("release", base.release))


def baseline_from_dict(d: Any, path: str = "") -> BaselineGeometry:
    """``r_m`` plus either ``half_separation`` or ``separation`` (full baseline)."""
    f = _Fields(d, path, ("r_m", "half_separation", "separation", "wavelength", "center_freq_hz"))
    if f.has("half_separation") == f.has("separation"):
        raise ConfigError(f.at("separation"), "give exactly one of separation or half_separation")
    half = f.number("half_separation") if f.has("half_separation") else 0.5 * f.number("separation")
    return _build(path, BaselineGeometry, r_m=f.number("r_m"), half_separation=half, wavelength=_wavelength(f))


@dataclass(frozen=True)
class EvalConfig:
    match_window: float = 0.5
    negatives_grid: float = 1.0
    span: tuple[float, float] | None = None
    class_boundaries: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.match_window > 0:
            raise ValueError("match_window must be > 0")
        if not self.negatives_grid > 0:
            raise ValueError("negatives_grid must be > 0")
        if self.span is not None and not self.span[1] >= self.span[0]:
            raise ValueError("span must be [start, end] with end >= start")
        if self.class_boundaries is not None and list(self.class_boundaries) != sorted(self.class_boundaries):
            raise ValueError("class_boundaries must be ascending")


def eval_from_dict(d: Any, path: str = "") -> EvalConfig:
    f = _Fields(d, path, ("match_window", "negatives_grid", "span", "class_boundaries"))
    span = _point(f.raw("span"), f.at("span")) if f.has("span") else None
    bounds = None
    if f.has("class_boundaries"):
        bounds = tuple(_number(x, _join(f.at("class_boundaries"), i))
                       for i, x in enumerate(f.items("class_boundaries")))
    return _build(path, EvalConfig, match_window=f.number("match_window", 0.5),
                  negatives_grid=f.number("negatives_grid", 1.0), span=span, class_boundaries=bounds)


# ---------------------------------------------------------------------------
# files

def load_json(path: str | Path) -> Any:
    """Read a JSON file; syntax errors become ``ConfigError`` with the line."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
