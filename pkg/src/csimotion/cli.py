"""Command-line front end: parse, simulate, process, detect, evaluate.

Every run writes ``manifest.json`` into its output directory before any other
output. The manifest records the subcommand, the inputs with their SHA-256,
the resolved configuration and its hash, the seed and the tool version; it
carries no timestamps, so identical inputs give byte-identical outputs.

Exit codes: 0 success, 2 usage, 3 unreadable or malformed input file,
4 invalid configuration, 5 processing failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path
from typing import Any, Sequence

from .channel import emit_capture, synthesize_pair, write_truth_csv as write_doppler_truth_csv
from .config import (
    ConfigError,
    EvalConfig,
    baseline_from_dict,
    config_hash,
    detector_from_dict,
    eval_from_dict,
    load_json,
    pipeline_from_dict,
    scenario_from_dict,
    scenario_to_dict,
)
from .csilog import (
    CsiLogError,
    capture_metadata,
    capture_to_series,
    export_series_csv,
    parse_capture,
    summarize,
    write_capture,
)
from .detect import (
    AmbiguousTruthError,
    EvaluationReport,
    calibrate_boundaries,
    classify_speed,
    detect_events,
    detection_threshold,
    evaluate,
    event_from_record,
    event_record,
    read_truth_csv,
    speed_classes,
    truth_class,
    with_speeds,
    write_confusion_csv,
    write_events_csv,
)
from .experiment import truth_events
from .detect import write_truth_csv as write_event_truth_csv
from .pipeline import AxisMismatchError, PipelineError, read_trace_csv, run_pipeline, write_flags_json, write_trace_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_PROCESSING = 5

DEFAULT_PAIR = ((0, 0), (0, 1))


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return load_json(path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read config {path}: {exc.strerror}") from None


def _check_inputs(paths: Sequence[str]) -> list[Path]:
    out = []
    for p in paths:
        path = Path(p)
        if not path.is_file():
            raise CliError(EXIT_INPUT, f"cannot read {p}: no such file")
        out.append(path)
    return out


def write_manifest(out: Path, subcommand: str, inputs: Sequence[Path], config_paths: Sequence[str | None],
                   config: Any, seed: int | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "config_paths": [p for p in config_paths if p is not None],
        "config": config,
        "config_hash": config_hash(config),
        "output_dir": str(out),
        "seed": seed,
        "tool_version": tool_version(),
    }
    _dump(manifest, out / "manifest.json")


def parse_pair(text: str) -> tuple[tuple[int, int], tuple[int, int]]:
    """``"P0,R0:P1,R1"`` -> ((P0, R0), (P1, R1)); the first key is the reference rx0."""
    try:
        a, b = text.split(":")
        k0 = tuple(int(x) for x in a.split(","))
        k1 = tuple(int(x) for x in b.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected PORT,RX:PORT,RX, got {text!r}") from None
    if len(k0) != 2 or len(k1) != 2:
        raise argparse.ArgumentTypeError(f"expected PORT,RX:PORT,RX, got {text!r}")
    return k0, k1


# ---------------------------------------------------------------------------
# subcommands


def cmd_parse(args) -> int:
    (log,) = _check_inputs([args.log])
    try:
        capture = parse_capture(log.read_text(encoding="utf-8"))
    except CsiLogError as exc:
        raise CliError(EXIT_INPUT, f"{log}: {exc}") from None
    summary = summarize(capture)
    if args.dump_config:
        print(json.dumps({}, indent=2))
        return EXIT_OK
    out = Path(args.out)
    write_manifest(out, "parse", [log], [], {}, None)
    for port, rx in summary.keys:
        try:
            series = capture_to_series(capture, port, rx)
        except CsiLogError as exc:
            raise CliError(EXIT_INPUT, f"{log}: {exc}") from None
        with open(out / f"series_p{port}_rx{rx}.csv", "w", encoding="utf-8", newline="") as fh:
            export_series_csv(series, fh)
    _dump(capture_metadata(capture), out / "metadata.json")
    print(summary)
    return EXIT_OK


def cmd_simulate(args) -> int:
    raw = _read_config(args.config)
    scenario = scenario_from_dict(raw, seed=args.seed)
    resolved = scenario_to_dict(scenario)
    if args.dump_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    inputs = _check_inputs([args.config]) if args.config else []
    out = Path(args.out)
    write_manifest(out, "simulate", inputs, [args.config], resolved, scenario.seed)
    rx0, rx1, truth = synthesize_pair(scenario.simulation)
    write_capture(emit_capture(rx0, rx1, scenario.record), out / "capture.log")
    with open(out / "truth.csv", "w", encoding="utf-8", newline="") as fh:
        write_doppler_truth_csv(truth, fh)
    with open(out / "crossings.csv", "w", encoding="utf-8", newline="") as fh:
        write_event_truth_csv(truth_events(truth), fh)
    print(f"{len(rx0.times)} samples x {rx0.values.shape[1]} subcarriers; {len(truth.crossings)} crossing(s)")
    return EXIT_OK


def cmd_process(args) -> int:
    (log,) = _check_inputs([args.log])
    raw = _read_config(args.config)
    try:
        capture = parse_capture(log.read_text(encoding="utf-8"))
    except CsiLogError as exc:
        raise CliError(EXIT_INPUT, f"{log}: {exc}") from None
    # The log's center-frequency field is stored verbatim only; the wavelength
    # comes from the pipeline config.
    cfg = pipeline_from_dict(raw)
    key0, key1 = args.pair
    resolved = {"pipeline": cfg.to_dict(), "pair": [list(key0), list(key1)]}
    if args.dump_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    write_manifest(out, "process", [log], [args.config], resolved, None)
    try:
        rx0 = capture_to_series(capture, *key0)
        rx1 = capture_to_series(capture, *key1)
    except CsiLogError as exc:
        raise CliError(EXIT_INPUT, f"{log}: {exc}") from None
    result = run_pipeline(rx1, rx0, cfg)
    with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fh:
        write_trace_csv(result, fh)
    with open(out / "flags.json", "w", encoding="utf-8") as fh:
        write_flags_json(result.flags, fh)
    print(f"{len(result.doppler)} samples; {len(result.flags)} degenerate sample(s)")
    return EXIT_OK


def cmd_detect(args) -> int:
    (trace_path,) = _check_inputs([args.trace])
    cfg = detector_from_dict(_read_config(args.config))
    geom = baseline_from_dict(_read_config(args.geometry)) if args.geometry else None
    resolved = {"detector": asdict(cfg), "geometry": asdict(geom) if geom else None}
    if args.dump_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    with open(trace_path, encoding="utf-8") as fh:
        try:
            trace = read_trace_csv(fh)
        except ValueError as exc:
            raise CliError(EXIT_INPUT, f"{trace_path}: {exc}") from None
    out = Path(args.out)
    write_manifest(out, "detect", [trace_path], [args.config, args.geometry], resolved, None)
    events = detect_events(trace, cfg)
    if geom is not None:
        events = with_speeds(events, geom)
    span = [float(trace.times[0]), float(trace.times[-1])] if len(trace) else [0.0, 0.0]
    threshold = detection_threshold(trace.v_delta, cfg) if len(trace) else None
    _dump({"span_s": span, "threshold_mps": threshold, "events": [event_record(e) for e in events]},
          out / "events.json")
    with open(out / "events.csv", "w", encoding="utf-8", newline="") as fh:
        write_events_csv(events, fh)
    print(f"{len(events)} event(s)")
    for e in events:
        speed = "" if e.speed_estimate != e.speed_estimate else f"  {e.speed_estimate * 3.6:.2f} km/h"
        print(f"  t={e.t_peak:.3f} s  v_delta={e.v_delta_peak:+.4f} m/s  {e.direction}{speed}")
    return EXIT_OK


def _load_events(path: Path):
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        events = [event_from_record(r) for r in doc["events"]]
        span = doc.get("span_s")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: not an events file ({exc})") from None
    return events, (tuple(span) if span else None)


def _classify(events, truth, cfg: EvalConfig, classes):
    """Boundaries from the config, else from labels in the file, else calibrated on matches."""
    if cfg.class_boundaries is not None:
        return classify_speed(events, cfg.class_boundaries), list(cfg.class_boundaries), "config"
    if events and all(e.speed_class is not None for e in events):
        return events, None, "events"
    probe = evaluate(events, truth, cfg.match_window, cfg.negatives_grid, span=cfg.span, classes=classes)
    try:
        bounds = calibrate_boundaries([(e.v_delta_peak, truth_class(g, classes)) for e, g in probe.matches])
    except ValueError as exc:
        return events, None, f"unavailable: {exc}"
    return classify_speed(events, bounds), bounds, "calibrated on matched events"


def cmd_evaluate(args) -> int:
    events_path, truth_path = _check_inputs([args.events, args.truth])
    cfg = eval_from_dict(_read_config(args.config))
    resolved = asdict(cfg)
    if args.dump_config:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    events, file_span = _load_events(events_path)
    with open(truth_path, encoding="utf-8") as fh:
        try:
            truth = read_truth_csv(fh)
        except ValueError as exc:
            raise CliError(EXIT_INPUT, f"{truth_path}: {exc}") from None
    if cfg.span is None and file_span is not None:
        cfg = EvalConfig(cfg.match_window, cfg.negatives_grid, file_span, cfg.class_boundaries)
    out = Path(args.out)
    write_manifest(out, "evaluate", [events_path, truth_path], [args.config], resolved, None)
    classes = speed_classes(truth)
    events, bounds, source = _classify(events, truth, cfg, classes)
    report: EvaluationReport = evaluate(events, truth, cfg.match_window, cfg.negatives_grid,
                                        span=cfg.span, classes=classes)
    doc = report.to_dict()
    doc["span_s"] = list(cfg.span) if cfg.span is not None else None
    doc["class_boundaries_mps"] = bounds
    doc["classification"] = source
    _dump(doc, out / "report.json")
    with open(out / "confusion.csv", "w", encoding="utf-8", newline="") as fh:
        write_confusion_csv(report, fh)
    print(format_summary(report))
    return EXIT_OK


def format_summary(report: EvaluationReport) -> str:
    def pct(x):
        return "n/a" if x != x else f"{x:.3f}"

    return (f"TP={report.tp} FP={report.fp} FN={report.fn} TN={report.tn}  "
            f"DR={pct(report.dr)} FPR={pct(report.fpr)} accuracy={pct(report.accuracy)}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csimotion", description="Dual-receiver CSI motion sensing.")
    p.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--out", default=".", help="output directory (created if missing)")
        sp.add_argument("--dump-config", action="store_true",
                        help="print the resolved configuration as JSON and exit")

    sp = sub.add_parser("parse", help="parse a CSI log into per-stream CSV series")
    sp.add_argument("log")
    common(sp, "unused; accepted for symmetry")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("simulate", help="synthesize a dual-receiver capture with ground truth")
    common(sp, "scenario JSON (default: reference indoor crossing)")
    sp.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("process", help="run the phase pipeline on a CSI log")
    sp.add_argument("log")
    common(sp, "pipeline JSON")
    sp.add_argument("--pair", type=parse_pair, default=DEFAULT_PAIR,
                    help="reference and second stream as PORT,RX:PORT,RX (default 0,0:0,1)")
    sp.set_defaults(func=cmd_process)

    sp = sub.add_parser("detect", help="detect crossings in a processed trace")
    sp.add_argument("trace")
    common(sp, "detector JSON")
    sp.add_argument("--geometry", help="baseline JSON with r_m and separation, enables speed estimates")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("evaluate", help="score detections against ground truth")
    sp.add_argument("events", help="events.json written by detect")
    sp.add_argument("truth", help="ground-truth CSV (t_s,speed,unit,direction)")
    common(sp, "evaluation JSON")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AxisMismatchError, PipelineError, AmbiguousTruthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROCESSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROCESSING


if __name__ == "__main__":
    sys.exit(main())
