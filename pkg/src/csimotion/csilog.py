"""Reading and writing the srsUE CSI estimation log.

A log is a sequence of records::

    [ESTIMATION]
    Timestamp: 1743022991574101
    SNR: 3.235169
    RSRP: 56.205956
    Cell Parameters: center_freq_Hz=..., nof_prb=100,
    cp=normal, symbol_sz=1536, useful_re=1200, offset=0, ofdm_symbols=14
    subcarrier_stride: 1, block_stride: 2
    [PORT 0]
    [RX ANTENNA 0]
    OFDM_Block 0: (-12.185438,0.139236), (-12.498656,-1.154930)
    OFDM_Block 2: ...
    [END ESTIMATION]

`parse_capture` turns such text into a `CsiCapture`; `format_capture` is its
inverse. `capture_to_series` flattens one (port, rx) stream onto a
time x subcarrier grid for the Doppler pipeline.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

LTE_SUBCARRIER_SPACING = 15e3
LTE_SYMBOL_DURATION = 1e-3 / 14

CP_KINDS = ("normal", "extended")

_CELL_FIELDS = (
    "center_freq_Hz",
    "nof_prb",
    "cp",
    "symbol_sz",
    "useful_re",
    "offset",
    "ofdm_symbols",
)


class CsiLogError(ValueError):
    """Parse or validation failure, positioned in the source text."""

    def __init__(self, message: str, record: int | None = None, line: int | None = None):
        self.reason = message
        self.record = record
        self.line = line
        where = []
        if record is not None:
            where.append(f"record {record}")
        if line is not None:
            where.append(f"line {line}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


@dataclass(frozen=True)
class CellParameters:
    center_freq_hz: float
    nof_prb: int
    cp: str
    symbol_sz: int
    useful_re: int
    offset: int
    ofdm_symbols: int

    def validate(self) -> None:
        if self.nof_prb <= 0:
            raise ValueError("nof_prb must be positive")
        if self.useful_re <= 0:
            raise ValueError("useful_re must be positive")
        if self.symbol_sz < self.useful_re:
            raise ValueError("symbol_sz must be >= useful_re")
        if self.cp not in CP_KINDS:
            raise ValueError(f"cp must be one of {CP_KINDS}, got {self.cp!r}")
        if self.ofdm_symbols <= 0:
            raise ValueError("ofdm_symbols must be positive")


@dataclass(frozen=True, eq=False)
class PortData:
    """CSI of one (port, rx) pair inside a record: rows are OFDM blocks."""

    ofdm_block_indices: tuple[int, ...]
    csi: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PortData):
            return NotImplemented
        return (
            self.ofdm_block_indices == other.ofdm_block_indices
            and self.csi.shape == other.csi.shape
            and bool(np.array_equal(self.csi, other.csi))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CsiBlock:
    timestamp: int
    snr: float
    rsrp: float
    cell: CellParameters
    subcarrier_stride: int
    block_stride: int
    port_data: dict[tuple[int, int], PortData]
    extra_headers: tuple[str, ...] = ()

    @property
    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.port_data)

    def validate(self) -> None:
        self.cell.validate()
        if self.subcarrier_stride <= 0 or self.block_stride <= 0:
            raise ValueError("strides must be positive")
        if not self.port_data:
            raise ValueError("record has no [PORT]/[RX ANTENNA] data")
        for (port, rx), pd in self.port_data.items():
            idx = pd.ofdm_block_indices
            if pd.csi.ndim != 2 or pd.csi.shape[0] != len(idx):
                raise ValueError(f"port {port} rx {rx}: csi rows do not match block indices")
            if pd.csi.shape[0] == 0:
                raise ValueError(f"port {port} rx {rx}: no OFDM blocks")
            if not np.all(np.isfinite(pd.csi)):
                raise ValueError(f"port {port} rx {rx}: non-finite CSI sample")
            for a, b in zip(idx, idx[1:]):
                if b <= a:
                    raise ValueError(f"port {port} rx {rx}: OFDM block indices not increasing")
                if (b - a) % self.block_stride:
                    raise ValueError(
                        f"port {port} rx {rx}: OFDM block spacing {b - a} "
                        f"is not a multiple of block_stride {self.block_stride}"
                    )
            if idx[0] < 0 or idx[-1] >= self.cell.ofdm_symbols:
                raise ValueError(
                    f"port {port} rx {rx}: OFDM block index outside 0..{self.cell.ofdm_symbols - 1}"
                )


@dataclass(frozen=True)
class CsiCapture:
    blocks: tuple[CsiBlock, ...] = ()

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def keys(self) -> list[tuple[int, int]]:
        return self.blocks[0].keys if self.blocks else []

    def validate(self) -> None:
        if not self.blocks:
            return
        first = self.blocks[0]
        ref_cols = {k: v.csi.shape[1] for k, v in first.port_data.items()}
        for i, block in enumerate(self.blocks):
            try:
                block.validate()
            except ValueError as exc:
                raise CsiLogError(str(exc), record=i) from None
            if i and block.timestamp < self.blocks[i - 1].timestamp:
                raise CsiLogError("timestamp decreases", record=i)
            cols = {k: v.csi.shape[1] for k, v in block.port_data.items()}
            if set(cols) != set(ref_cols):
                raise CsiLogError(
                    f"(port, rx) set {sorted(cols)} differs from first record {sorted(ref_cols)}",
                    record=i,
                )
            if cols != ref_cols:
                raise CsiLogError("subcarrier count differs from first record", record=i)


@dataclass(frozen=True, eq=False)
class RxSeries:
    """CSI of one receiver on a (time, subcarrier) grid.

    ``times`` are seconds relative to the first sample, ``freqs`` are absolute
    subcarrier frequencies in Hz and ``values`` has shape (len(times), len(freqs)).
    """

    times: np.ndarray
    freqs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.times), len(self.freqs)):
            raise ValueError(
                f"values shape {self.values.shape} does not match axes "
                f"({len(self.times)}, {len(self.freqs)})"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# parsing

_PAIR = re.compile(r"\(\s*([^(),\s]+)\s*,\s*([^(),\s]+)\s*\)")
_SECTION = re.compile(r"^\[\s*(PORT|RX ANTENNA)\s+(-?\d+)\s*\]$")
_BLOCK = re.compile(r"^OFDM_Block\s+(\d+)\s*:(.*)$")


def _to_int(text: str, what: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ValueError(f"{what}: expected an integer, got {text.strip()!r}") from None


def _to_float(text: str, what: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise ValueError(f"{what}: expected a number, got {text.strip()!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"{what}: non-finite value {text.strip()!r}")
    return value


def _parse_pairs(text: str) -> list[complex]:
    values = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _PAIR.match(text, pos)
        if m is None:
            raise ValueError(f"malformed complex pair near {text[pos:pos + 30]!r}")
        re_ = _to_float(m.group(1), "real part")
        im_ = _to_float(m.group(2), "imaginary part")
        values.append(complex(re_, im_))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos < len(text):
            if text[pos] != ",":
                raise ValueError(f"malformed complex pair list near {text[pos:pos + 30]!r}")
            pos += 1
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos == len(text):
                raise ValueError("trailing comma after last complex pair")
    if not values:
        raise ValueError("OFDM_Block line without samples")
    return values


class _RecordBuilder:
    def __init__(self, record: int, line: int):
        self.record = record
        self.start_line = line
        self.headers: dict[str, tuple[str, int]] = {}
        self.cell_text: list[tuple[str, int]] = []
        self.extra: list[str] = []
        self.port: int | None = None
        self.rx: int | None = None
        self.rows: dict[tuple[int, int], list[tuple[int, list[complex], int]]] = {}
        self.in_cell = False

    def fail(self, message: str, line: int):
        raise CsiLogError(message, record=self.record, line=line)

    def header(self, text: str, lineno: int) -> None:
        if self.port is not None:
            self.fail(f"header line after data section: {text!r}", lineno)
        key, sep, rest = text.partition(":")
        key = key.strip()
        if not sep:
            if self.in_cell and "=" in text:
                self.cell_text.append((text, lineno))
                return
            self.extra.append(text)
            return
        self.in_cell = False
        if key == "Cell Parameters":
            self.cell_text.append((rest, lineno))
            self.in_cell = True
        elif key in ("Timestamp", "SNR", "RSRP"):
            self._set(key, rest, lineno)
        elif key in ("subcarrier_stride", "block_stride"):
            # "subcarrier_stride: 1, block_stride: 2"
            for item in text.split(","):
                k, s, v = item.partition(":")
                k = k.strip()
                if not s or k not in ("subcarrier_stride", "block_stride"):
                    self.fail(f"malformed stride header {text!r}", lineno)
                self._set(k, v, lineno)
        else:
            self.extra.append(text)

    def _set(self, key: str, value: str, lineno: int) -> None:
        if key in self.headers:
            self.fail(f"duplicate header {key!r}", lineno)
        self.headers[key] = (value.strip(), lineno)

    def section(self, kind: str, number: int, lineno: int) -> None:
        self.in_cell = False
        if kind == "PORT":
            self.port, self.rx = number, None
            return
        if self.port is None:
            self.fail("[RX ANTENNA] before any [PORT]", lineno)
        self.rx = number
        key = (self.port, number)
        if key in self.rows:
            self.fail(f"duplicate section port {key[0]} rx {key[1]}", lineno)
        self.rows[key] = []

    def ofdm_block(self, index: int, payload: str, lineno: int) -> None:
        if self.port is None or self.rx is None:
            self.fail("OFDM_Block outside a [PORT]/[RX ANTENNA] section", lineno)
        try:
            samples = _parse_pairs(payload)
        except ValueError as exc:
            self.fail(str(exc), lineno)
        rows = self.rows[(self.port, self.rx)]
        if rows and len(rows[0][1]) != len(samples):
            self.fail(
                f"inconsistent subcarrier count: {len(samples)} samples, "
                f"expected {len(rows[0][1])}",
                lineno,
            )
        rows.append((index, samples, lineno))

    def _cell(self) -> CellParameters:
        if not self.cell_text:
            self.fail("missing 'Cell Parameters' header", self.start_line)
        items: dict[str, tuple[str, int]] = {}
        for text, lineno in self.cell_text:
            for item in text.split(","):
                if not item.strip():
                    continue
                k, sep, v = item.partition("=")
                if not sep:
                    self.fail(f"malformed cell parameter {item.strip()!r}", lineno)
                items[k.strip()] = (v.strip(), lineno)
        missing = [k for k in _CELL_FIELDS if k not in items]
        if missing:
            self.fail(f"missing cell parameters {missing}", self.cell_text[0][1])
        values = {}
        for k in _CELL_FIELDS:
            text, lineno = items[k]
            try:
                if k == "center_freq_Hz":
                    values["center_freq_hz"] = _to_float(text, k)
                elif k == "cp":
                    if text not in CP_KINDS:
                        raise ValueError(f"cp: expected one of {CP_KINDS}, got {text!r}")
                    values["cp"] = text
                else:
                    values[k] = _to_int(text, k)
            except ValueError as exc:
                self.fail(str(exc), lineno)
        return CellParameters(**values)

    def _header(self, key: str, conv):
        if key not in self.headers:
            self.fail(f"missing '{key}' header", self.start_line)
        text, lineno = self.headers[key]
        try:
            return conv(text, key)
        except ValueError as exc:
            self.fail(str(exc), lineno)

    def build(self, end_line: int) -> CsiBlock:
        cell = self._cell()
        port_data = {}
        for key, rows in self.rows.items():
            if not rows:
                self.fail(f"port {key[0]} rx {key[1]} has no OFDM_Block lines", end_line)
            port_data[key] = PortData(
                ofdm_block_indices=tuple(r[0] for r in rows),
                csi=np.array([r[1] for r in rows], dtype=np.complex128),
            )
        block = CsiBlock(
            timestamp=self._header("Timestamp", _to_int),
            snr=self._header("SNR", _to_float),
            rsrp=self._header("RSRP", _to_float),
            cell=cell,
            subcarrier_stride=self._header("subcarrier_stride", _to_int),
            block_stride=self._header("block_stride", _to_int),
            port_data=port_data,
            extra_headers=tuple(self.extra),
        )
        try:
            block.validate()
        except ValueError as exc:
            self.fail(str(exc), end_line)
        return block


def parse_capture(source: TextIO | str | Iterable[str]) -> CsiCapture:
    """Parse `[ESTIMATION]` records from text, a text stream or an iterable of lines.

    Raises `CsiLogError` carrying the record index and the 1-based line number
    of the first problem found.
    """
    if isinstance(source, str):
        lines: Iterable[str] = source.splitlines()
    else:
        lines = source

    blocks: list[CsiBlock] = []
    current: _RecordBuilder | None = None
    lineno = 0
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if current is None:
            if not text:
                continue
            if text == "[ESTIMATION]":
                current = _RecordBuilder(len(blocks), lineno)
                continue
            raise CsiLogError(f"unexpected text outside a record: {text[:40]!r}",
                              record=len(blocks), line=lineno)
        if not text:
            continue
        if text == "[END ESTIMATION]":
            blocks.append(current.build(lineno))
            current = None
            continue
        if text == "[ESTIMATION]":
            raise CsiLogError("missing [END ESTIMATION] before next [ESTIMATION]",
                              record=current.record, line=lineno)
        m = _SECTION.match(text)
        if m:
            current.section(m.group(1), int(m.group(2)), lineno)
            continue
        m = _BLOCK.match(text)
        if m:
            current.ofdm_block(int(m.group(1)), m.group(2), lineno)
            continue
        if text.startswith("["):
            current.fail(f"unknown section {text!r}", lineno)
        current.header(text, lineno)

    if current is not None:
        raise CsiLogError("missing [END ESTIMATION]", record=current.record, line=lineno)

    capture = CsiCapture(tuple(blocks))
    capture.validate()
    return capture


def read_capture(path) -> CsiCapture:
    with open(path, encoding="utf-8") as fh:
        return parse_capture(fh)


# ---------------------------------------------------------------------------
# formatting


def _f6(x: float) -> str:
    return f"{x:.6f}"


def _format_block(block: CsiBlock) -> list[str]:
    c = block.cell
    lines = [
        "[ESTIMATION]",
        f"Timestamp: {block.timestamp}",
        f"SNR: {_f6(block.snr)}",
        f"RSRP: {_f6(block.rsrp)}",
        f"Cell Parameters: center_freq_Hz={_f6(c.center_freq_hz)}, nof_prb={c.nof_prb}, "
        f"cp={c.cp}, symbol_sz={c.symbol_sz}, useful_re={c.useful_re}, "
        f"offset={c.offset}, ofdm_symbols={c.ofdm_symbols}",
        f"subcarrier_stride: {block.subcarrier_stride}, block_stride: {block.block_stride}",
    ]
    lines.extend(block.extra_headers)
    current_port = None
    for port, rx in block.keys:
        if port != current_port:
            lines.append(f"[PORT {port}]")
            current_port = port
        lines.append(f"[RX ANTENNA {rx}]")
        pd = block.port_data[(port, rx)]
        for idx, row in zip(pd.ofdm_block_indices, pd.csi):
            pairs = ", ".join(f"({_f6(z.real)},{_f6(z.imag)})" for z in row)
            lines.append(f"OFDM_Block {idx}: {pairs}")
    lines.append("[END ESTIMATION]")
    return lines


def format_capture(capture: CsiCapture) -> str:
    """Render a capture in the log format, six fractional digits per number."""
    out: list[str] = []
    for block in capture.blocks:
        out.extend(_format_block(block))
    return "\n".join(out) + ("\n" if out else "")


def write_capture(capture: CsiCapture, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_capture(capture))


# ---------------------------------------------------------------------------
# flattening and export


def subcarrier_frequencies(center_freq_hz: float, count: int, spacing_hz: float) -> np.ndarray:
    """Subcarrier centres, indices symmetric about the carrier."""
    k = np.arange(count) - (count - 1) / 2.0
    return center_freq_hz + k * spacing_hz


def capture_to_series(
    capture: CsiCapture,
    port: int,
    rx: int,
    symbol_duration: float = LTE_SYMBOL_DURATION,
    subcarrier_spacing: float = LTE_SUBCARRIER_SPACING,
) -> RxSeries:
    """Stack every OFDM block of one (port, rx) stream into an `RxSeries`.

    A sample's absolute time is its record timestamp (microseconds) plus
    ``ofdm_block_index * symbol_duration``; the returned axis is relative to the
    first sample. Subcarrier spacing is ``subcarrier_spacing * subcarrier_stride``.
    """
    key = (port, rx)
    if not capture.blocks:
        return RxSeries(np.zeros(0), np.zeros(0), np.zeros((0, 0), dtype=np.complex128))
    t0_us = capture.blocks[0].timestamp
    times = []
    rows = []
    for i, block in enumerate(capture.blocks):
        if key not in block.port_data:
            raise CsiLogError(f"port {port} rx {rx} missing", record=i)
        pd = block.port_data[key]
        offset = (block.timestamp - t0_us) * 1e-6
        times.extend(offset + np.asarray(pd.ofdm_block_indices) * symbol_duration)
        rows.append(pd.csi)
    times = np.asarray(times, dtype=float)
    times -= times[0]
    if np.any(np.diff(times) <= 0):
        bad = int(np.argmax(np.diff(times) <= 0)) + 1
        raise CsiLogError(f"non-increasing sample time at sample {bad} for port {port} rx {rx}")
    first = capture.blocks[0]
    values = np.vstack(rows)
    freqs = subcarrier_frequencies(
        first.cell.center_freq_hz,
        values.shape[1],
        subcarrier_spacing * first.subcarrier_stride,
    )
    return RxSeries(times=times, freqs=freqs, values=values)


def fmt_number(x: float) -> str:
    """Shortest round-tripping text for a float; integral values print without '.0'."""
    x = float(x)
    if x == 0.0:
        return "0"
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def export_series_csv(series: RxSeries, sink: TextIO) -> None:
    """Write ``t_s,f_hz,re,im`` rows, time-major then frequency."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["t_s", "f_hz", "re", "im"])
    freqs = [fmt_number(f) for f in series.freqs]
    for t, row in zip(series.times, series.values):
        ts = fmt_number(t)
        for f, z in zip(freqs, row):
            writer.writerow([ts, f, fmt_number(z.real), fmt_number(z.imag)])


def capture_metadata(capture: CsiCapture) -> dict:
    """JSON-ready description of every record, without the CSI samples."""
    blocks = []
    for block in capture.blocks:
        c = block.cell
        blocks.append({
            "timestamp": block.timestamp,
            "snr": block.snr,
            "rsrp": block.rsrp,
            "center_freq_hz": c.center_freq_hz,
            "nof_prb": c.nof_prb,
            "cp": c.cp,
            "symbol_sz": c.symbol_sz,
            "useful_re": c.useful_re,
            "offset": c.offset,
            "ofdm_symbols": c.ofdm_symbols,
            "subcarrier_stride": block.subcarrier_stride,
            "block_stride": block.block_stride,
            "port_data": {
                f"{p},{r}": {
                    "ofdm_block_indices": list(pd.ofdm_block_indices),
                    "shape": list(pd.csi.shape),
                }
                for (p, r), pd in sorted(block.port_data.items())
            },
            "extra_headers": list(block.extra_headers),
        })
    return {"blocks": blocks}


@dataclass
class CaptureSummary:
    n_blocks: int
    keys: list[tuple[int, int]] = field(default_factory=list)
    samples: dict[tuple[int, int], int] = field(default_factory=dict)

    def __str__(self) -> str:
        if not self.n_blocks:
            return "0 blocks"
        keys = ", ".join(f"({p},{r})" for p, r in self.keys)
        return f"{self.n_blocks} block{'s' if self.n_blocks != 1 else ''}; (port,rx) keys: {keys}"


def summarize(capture: CsiCapture) -> CaptureSummary:
    keys = capture.keys
    samples = {k: sum(b.port_data[k].csi.size for b in capture.blocks) for k in keys}
    return CaptureSummary(len(capture), keys, samples)
