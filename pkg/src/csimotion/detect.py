"""Crossing detection, speed estimation, speed classes and scoring."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence, TextIO

import numpy as np

from .csilog import fmt_number
from .pipeline import DopplerTrace

log = logging.getLogger(__name__)

RX0_TO_RX1 = "rx0_to_rx1"
RX1_TO_RX0 = "rx1_to_rx0"
MPS_PER_MMPM = 1.0 / 60_000.0
KMH_PER_MPS = 3.6


class AmbiguousTruthError(ValueError):
    pass


@dataclass(frozen=True)
class MotionEvent:
    t_peak: float
    v_delta_peak: float
    index: int = -1
    speed_estimate: float = float("nan")
    speed_class: int | None = None

    @property
    def direction(self) -> str:
        return RX0_TO_RX1 if self.v_delta_peak > 0 else RX1_TO_RX0


@dataclass(frozen=True)
class DetectorConfig:
    """Peak detector settings.

    ``threshold_mode="absolute"`` flags |v_delta| above ``v_min`` (m/s).
    ``threshold_mode="robust"`` uses median(|v|) + k * MAD(|v|) of the trace
    itself (never below ``floor``), so the level follows each session's noise
    floor. Two peaks count as one pass when |v| between them stays above
    ``release`` times the smaller peak, so ripple on a slow hump's flank does
    not split the pass. Peaks closer than ``min_separation`` seconds are also
    merged into the larger one.
    """

    threshold_mode: str = "robust"
    v_min: float = 0.01
    k: float = 5.0
    floor: float = 2e-3
    min_separation: float = 1.0
    release: float = 0.25

    def __post_init__(self):
        if self.threshold_mode not in ("absolute", "robust"):
            raise ValueError("threshold_mode must be 'absolute' or 'robust'")
        if self.threshold_mode == "absolute" and not self.v_min > 0:
            raise ValueError("v_min must be > 0")
        if self.threshold_mode == "robust" and not self.k > 0:
            raise ValueError("k must be > 0")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")
        if not 0 < self.release <= 1:
            raise ValueError("release must be in (0, 1]")


@dataclass(frozen=True)
class BaselineGeometry:
    r_m: float
    half_separation: float
    wavelength: float

    def __post_init__(self):
        if not (self.r_m > 0 and self.half_separation > 0 and self.wavelength > 0):
            raise ValueError("r_m, half_separation and wavelength must all be > 0")


@dataclass(frozen=True)
class GroundTruthEvent:
    t_true: float
    speed_true: float
    direction_true: str | None = None


@dataclass
class EvaluationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    matches: list[tuple[MotionEvent, GroundTruthEvent]]
    classes: list[float] = field(default_factory=list)
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=int))
    match_window: float = 0.0
    negatives_grid: float = 0.0

    @property
    def dr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else float("nan")

    @property
    def accuracy(self) -> float:
        total = int(self.confusion.sum())
        return float(np.trace(self.confusion)) / total if total else float("nan")

    def to_dict(self) -> dict:
        def num(x):
            return None if x != x else x

        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "dr": num(self.dr),
            "fpr": num(self.fpr),
            "accuracy": num(self.accuracy),
            "match_window_s": self.match_window,
            "negatives_grid_s": self.negatives_grid,
            "classes_mps": list(self.classes),
            "confusion": self.confusion.tolist(),
            "matches": [
                {
                    "t_peak": e.t_peak,
                    "v_delta_peak": e.v_delta_peak,
                    "direction": e.direction,
                    "speed_class": e.speed_class,
                    "t_true": g.t_true,
                    "speed_true_mps": g.speed_true,
                    "direction_true": g.direction_true,
                }
                for e, g in self.matches
            ],
        }


# ---------------------------------------------------------------------------
# detection


def detection_threshold(v: np.ndarray, cfg: DetectorConfig) -> float:
    if cfg.threshold_mode == "absolute":
        return cfg.v_min
    a = np.abs(v)
    med = float(np.median(a))
    mad = float(np.median(np.abs(a - med)))
    return max(cfg.floor, med + cfg.k * mad)


def local_maxima(a: np.ndarray) -> np.ndarray:
    """Indices of interior local maxima of ``a``; a plateau contributes its middle sample.

    The first and last samples never qualify: a trace that is still rising
    where it is cut off has no observed extremum there.
    """
    n = len(a)
    out = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and a[j + 1] == a[i]:
            j += 1
        if i > 0 and j < n - 1 and a[i - 1] < a[i] and a[j + 1] < a[i]:
            out.append((i + j) // 2)
        i = j + 1
    return np.asarray(out, dtype=int)


def detect_events(trace: DopplerTrace, cfg: DetectorConfig = DetectorConfig()) -> list[MotionEvent]:
    """Peaks of |v_delta| above threshold, largest first, with suppression.

    A candidate is dropped when a larger kept peak lies within
    ``min_separation`` seconds, or when |v| between the two never falls below
    ``release`` times the candidate's height (both sit on one hump). Neither
    rule depends on the threshold, so raising it only removes events.
    """
    v = np.asarray(trace.v_delta, dtype=float)
    t = np.asarray(trace.times, dtype=float)
    if v.size == 0:
        return []
    a = np.abs(v)
    thr = detection_threshold(v, cfg)
    candidates = [int(i) for i in local_maxima(a) if a[i] > thr]
    kept: list[int] = []
    for i in sorted(candidates, key=lambda i: (-a[i], i)):
        suppressed = False
        for j in kept:
            lo, hi = min(i, j), max(i, j)
            if abs(t[i] - t[j]) < cfg.min_separation or a[lo:hi + 1].min() > cfg.release * a[i]:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [MotionEvent(t_peak=float(t[i]), v_delta_peak=float(v[i]), index=i) for i in sorted(kept)]


# ---------------------------------------------------------------------------
# speed


def estimate_speed(event: MotionEvent | float, geom: BaselineGeometry) -> float:
    """|v_x| = |v_delta at crossing| * R_m / |2 (x_c - x_0)|."""
    v_delta = event.v_delta_peak if isinstance(event, MotionEvent) else float(event)
    return abs(v_delta) * geom.r_m / abs(2.0 * geom.half_separation)


def estimate_speed_from_dnu(dnu_hz: float, geom: BaselineGeometry) -> float:
    return estimate_speed(geom.wavelength * dnu_hz, geom)


def with_speeds(events: Sequence[MotionEvent], geom: BaselineGeometry) -> list[MotionEvent]:
    return [replace(e, speed_estimate=estimate_speed(e, geom)) for e in events]


def classify_speed(events: Sequence[MotionEvent], boundaries: Sequence[float]) -> list[MotionEvent]:
    """Bin each event by |v_delta_peak|; a value on a boundary goes to the lower bin."""
    b = np.asarray(boundaries, dtype=float)
    if np.any(np.diff(b) <= 0):
        raise ValueError("boundaries must be strictly increasing")
    return [
        replace(e, speed_class=int(np.searchsorted(b, abs(e.v_delta_peak), side="left")))
        for e in events
    ]


def calibrate_boundaries(training: Sequence[tuple[float, int]]) -> list[float]:
    """Midpoints between the medians of |v_delta_peak| of adjacent classes.

    ``training`` holds (v_delta_peak, class) pairs; classes are ordered by their
    label and must have strictly increasing medians.
    """
    by_class: dict[int, list[float]] = {}
    for v, c in training:
        by_class.setdefault(int(c), []).append(abs(float(v)))
    labels = sorted(by_class)
    if len(labels) < 2:
        raise ValueError("need at least two classes to calibrate")
    if labels != list(range(labels[-1] + 1)):
        missing = sorted(set(range(labels[-1] + 1)) - set(labels))
        raise ValueError(f"classes without training events: {missing}")
    medians = [float(np.median(by_class[c])) for c in labels]
    for c, (m0, m1) in enumerate(zip(medians, medians[1:])):
        if not m1 > m0:
            raise ValueError(
                f"classes {c} and {c + 1} are not separable: medians {m0:.6g} and {m1:.6g}"
            )
    return [0.5 * (m0 + m1) for m0, m1 in zip(medians, medians[1:])]


# ---------------------------------------------------------------------------
# scoring


def speed_classes(truth: Sequence[GroundTruthEvent], decimals: int = 9) -> list[float]:
    return sorted({round(abs(g.speed_true), decimals) for g in truth})


def truth_class(g: GroundTruthEvent, classes: Sequence[float], decimals: int = 9) -> int:
    return list(classes).index(round(abs(g.speed_true), decimals))


def match_events(events: Sequence[MotionEvent], truth: Sequence[GroundTruthEvent],
                 match_window: float) -> list[tuple[int, int]]:
    """Optimal one-to-one matching within the window.

    Maximizes the number of pairs, then minimizes the summed |t_peak - t_true|.
    On a time line some optimal matching never crosses, so a dynamic program
    over both time-sorted lists is exact. Returns (event, truth) index pairs
    ordered by truth index.
    """
    ei = sorted(range(len(events)), key=lambda i: events[i].t_peak)
    gi = sorted(range(len(truth)), key=lambda j: truth[j].t_true)
    n, m = len(ei), len(gi)
    # best[a][b] = (-pairs, cost) over the first a events and first b truths
    best = [[(0, 0.0)] * (m + 1) for _ in range(n + 1)]
    move = [[0] * (m + 1) for _ in range(n + 1)]
    for a in range(1, n + 1):
        for b in range(1, m + 1):
            cand = [(best[a - 1][b], 1), (best[a][b - 1], 2)]
            d = abs(events[ei[a - 1]].t_peak - truth[gi[b - 1]].t_true)
            if d <= match_window:
                k, c = best[a - 1][b - 1]
                cand.append(((k - 1, c + d), 3))
            best[a][b], move[a][b] = min(cand)
    out = []
    a, b = n, m
    while a and b:
        step = move[a][b]
        if step == 3:
            out.append((ei[a - 1], gi[b - 1]))
        a, b = (a - 1, b) if step == 1 else (a, b - 1) if step == 2 else (a - 1, b - 1)
    return sorted(out, key=lambda p: p[1])


def count_negatives(fp_times: Sequence[float], truth: Sequence[GroundTruthEvent], match_window: float,
                    negatives_grid: float, span: tuple[float, float]) -> int:
    """True negatives: grid cells clear of every truth window and every false positive."""
    t0, t1 = span
    n_cells = int(np.floor((t1 - t0) / negatives_grid + 1e-9))
    tn = 0
    for c in range(n_cells):
        lo, hi = t0 + c * negatives_grid, t0 + (c + 1) * negatives_grid
        if any(lo < g.t_true + match_window and g.t_true - match_window < hi for g in truth):
            continue
        if any(lo <= t < hi for t in fp_times):
            continue
        tn += 1
    return tn


def evaluate(
    events: Sequence[MotionEvent],
    truth: Sequence[GroundTruthEvent],
    match_window: float = 0.5,
    negatives_grid: float = 1.0,
    span: tuple[float, float] | None = None,
    classes: Sequence[float] | None = None,
) -> EvaluationReport:
    """Score detections against ground truth.

    Confusion rows are true speed classes (ascending speed), columns the
    predicted ``speed_class``; only matched events with a class contribute.
    """
    if not match_window > 0:
        raise ValueError("match_window must be > 0")
    if not negatives_grid > 0:
        raise ValueError("negatives_grid must be > 0")
    truth = sorted(truth, key=lambda g: g.t_true)
    for a, b in zip(truth, truth[1:]):
        if b.t_true - a.t_true < match_window:
            raise AmbiguousTruthError(
                f"ground-truth events at {a.t_true:.6g} s and {b.t_true:.6g} s are closer "
                f"than the match window ({match_window} s)"
            )
    if span is None:
        times = [e.t_peak for e in events] + [g.t_true for g in truth]
        span = (0.0, (max(times) + match_window) if times else 0.0)

    pairs = match_events(events, truth, match_window)
    matched_e = {i for i, _ in pairs}
    matches = [(events[i], truth[j]) for i, j in pairs]
    fp_times = [e.t_peak for i, e in enumerate(events) if i not in matched_e]
    tp = len(pairs)
    fn = len(truth) - tp
    fp = len(fp_times)
    tn = count_negatives(fp_times, truth, match_window, negatives_grid, span)

    classes = list(classes) if classes is not None else speed_classes(truth)
    n = len(classes)
    confusion = np.zeros((n, n), dtype=int)
    for e, g in matches:
        if e.speed_class is None:
            continue
        pred = min(max(e.speed_class, 0), n - 1)
        confusion[truth_class(g, classes), pred] += 1
    return EvaluationReport(tp, fp, fn, tn, matches, classes, confusion, match_window, negatives_grid)


@dataclass
class Session:
    events: list[MotionEvent]
    truth: list[GroundTruthEvent]
    span: tuple[float, float] | None = None


@dataclass
class ProtocolResult:
    intra: EvaluationReport
    inter: EvaluationReport
    intra_sessions: list[EvaluationReport]
    boundaries: list[list[float]]

    @property
    def intra_accuracy(self) -> float:
        return self.intra.accuracy

    @property
    def inter_accuracy(self) -> float:
        return self.inter.accuracy


def _training_pairs(session: Session, match_window: float, classes: Sequence[float]):
    rep = evaluate(session.events, session.truth, match_window, span=session.span, classes=classes)
    return [(e.v_delta_peak, truth_class(g, classes)) for e, g in rep.matches]


def _merge(reports: Sequence[EvaluationReport], classes: Sequence[float]) -> EvaluationReport:
    n = len(classes)
    conf = np.zeros((n, n), dtype=int)
    for r in reports:
        conf += r.confusion
    return EvaluationReport(
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        tn=sum(r.tn for r in reports),
        matches=[m for r in reports for m in r.matches],
        classes=list(classes),
        confusion=conf,
        match_window=reports[0].match_window if reports else 0.0,
        negatives_grid=reports[0].negatives_grid if reports else 0.0,
    )


def intra_inter_protocol(sessions: Sequence[Session], match_window: float = 0.5) -> ProtocolResult:
    """Speed classification scored within and across sessions.

    Intra: each session is classified with boundaries calibrated on its own
    matched events. Inter: every session is classified with the boundaries of
    every other session; all ordered pairs are pooled.
    """
    if len(sessions) < 2:
        raise ValueError("inter-session classification needs at least two sessions")
    classes = speed_classes([g for s in sessions for g in s.truth])
    bounds = [calibrate_boundaries(_training_pairs(s, match_window, classes)) for s in sessions]

    def score(s: Session, b: list[float]) -> EvaluationReport:
        return evaluate(classify_speed(s.events, b), s.truth, match_window, span=s.span, classes=classes)

    intra_reports = [score(s, b) for s, b in zip(sessions, bounds)]
    inter_reports = [
        score(s, bounds[i]) for i in range(len(sessions)) for j, s in enumerate(sessions) if j != i
    ]
    return ProtocolResult(
        intra=_merge(intra_reports, classes),
        inter=_merge(inter_reports, classes),
        intra_sessions=intra_reports,
        boundaries=bounds,
    )


# ---------------------------------------------------------------------------
# files

TRUTH_COLUMNS = ("t_s", "speed", "unit", "direction")
EVENT_COLUMNS = ("t_peak_s", "v_delta_peak_mps", "direction", "speed_mps", "speed_kmh", "speed_class")


def read_truth_csv(source: TextIO) -> list[GroundTruthEvent]:
    reader = csv.DictReader(source)
    if reader.fieldnames is None:
        return []
    missing = [c for c in ("t_s", "speed") if c not in reader.fieldnames]
    if missing:
        raise ValueError(f"ground-truth CSV lacks columns {missing}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            t = float(row["t_s"])
            speed = float(row["speed"])
        except (TypeError, ValueError):
            raise ValueError(f"ground-truth line {lineno}: malformed row") from None
        unit = (row.get("unit") or "mps").strip()
        if unit == "mmpm":
            speed *= MPS_PER_MMPM
        elif unit != "mps":
            raise ValueError(f"ground-truth line {lineno}: unit must be mps or mmpm, got {unit!r}")
        direction = (row.get("direction") or "").strip() or None
        out.append(GroundTruthEvent(t, speed, direction))
    return sorted(out, key=lambda g: g.t_true)


def write_truth_csv(truth: Sequence[GroundTruthEvent], sink: TextIO, unit: str = "mps") -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(TRUTH_COLUMNS)
    scale = 1.0 / MPS_PER_MMPM if unit == "mmpm" else 1.0
    for g in truth:
        writer.writerow([fmt_number(g.t_true), fmt_number(g.speed_true * scale), unit, g.direction_true or ""])


def event_record(e: MotionEvent) -> dict:
    speed = None if e.speed_estimate != e.speed_estimate else e.speed_estimate
    return {
        "t_peak_s": e.t_peak,
        "v_delta_peak_mps": e.v_delta_peak,
        "direction": e.direction,
        "index": e.index,
        "speed_mps": speed,
        "speed_kmh": None if speed is None else speed * KMH_PER_MPS,
        "speed_class": e.speed_class,
    }


def event_from_record(d: dict) -> MotionEvent:
    speed = d.get("speed_mps")
    return MotionEvent(
        t_peak=float(d["t_peak_s"]),
        v_delta_peak=float(d["v_delta_peak_mps"]),
        index=int(d.get("index", -1)),
        speed_estimate=float("nan") if speed is None else float(speed),
        speed_class=d.get("speed_class"),
    )


def write_events_csv(events: Sequence[MotionEvent], sink: TextIO) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(EVENT_COLUMNS)
    for e in events:
        r = event_record(e)
        writer.writerow([
            fmt_number(r["t_peak_s"]),
            fmt_number(r["v_delta_peak_mps"]),
            r["direction"],
            "" if r["speed_mps"] is None else fmt_number(r["speed_mps"]),
            "" if r["speed_kmh"] is None else fmt_number(r["speed_kmh"]),
            "" if r["speed_class"] is None else r["speed_class"],
        ])


def write_confusion_csv(report: EvaluationReport, sink: TextIO) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    labels = [f"{c:.9g}" for c in report.classes]
    writer.writerow(["true\\pred"] + labels)
    for label, row in zip(labels, report.confusion):
        writer.writerow([label] + [int(x) for x in row])
