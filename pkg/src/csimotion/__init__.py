"""Passive motion sensing from dual-receiver LTE channel state information.

Modules:

* ``csilog``: parse and write CSI logs, turn a stream into a time/frequency series.
* ``channel``: bistatic geometry, Doppler ground truth and synthetic CSI.
* ``pipeline``: conjugate product to differential Doppler trace.
* ``detect``: crossing detection, speed estimation and scoring.
* ``experiment``: batch simulation helpers.
* ``config`` and ``cli``: JSON configuration and the ``csimotion`` command.
"""

from .channel import ScenarioGeometry, SimulationConfig, reference_config, synthesize_pair
from .csilog import CsiCapture, CsiLogError, RxSeries, capture_to_series, parse_capture
from .detect import BaselineGeometry, DetectorConfig, MotionEvent, detect_events, estimate_speed, evaluate
from .pipeline import PipelineConfig, run_pipeline

__all__ = [
    "BaselineGeometry",
    "CsiCapture",
    "CsiLogError",
    "DetectorConfig",
    "MotionEvent",
    "PipelineConfig",
    "RxSeries",
    "ScenarioGeometry",
    "SimulationConfig",
    "capture_to_series",
    "detect_events",
    "estimate_speed",
    "evaluate",
    "parse_capture",
    "reference_config",
    "run_pipeline",
    "synthesize_pair",
]
