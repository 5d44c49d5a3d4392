"""Gate-trace CSV export and parse-back."""

from __future__ import annotations

import csv
from pathlib import Path

from ..errors import ConfigError, NoDataError
from ..fusion import GateTrace

MEAN_HEADER = ("decoder_layer", "vision_layer", "weight")
RAW_HEADER = ("decoder_layer", "vision_layer", "batch", "step", "weight")


def gate_rows(trace: GateTrace, aggregation: str = "mean") -> list[tuple]:
    if len(trace) == 0:
        raise NoDataError("gate trace is empty; run an evaluation in cli mode first")
    if aggregation == "mean":
        return [(dl, vl, w) for (dl, vl), w in sorted(trace.means().items())]
    if aggregation == "raw":
        rows = [(r.decoder_layer, r.vision_layer, r.batch_index, r.step, r.weight) for r in trace]
        return sorted(rows, key=lambda r: (r[0], r[1], r[3], r[2]))
    raise ConfigError(f"aggregation must be 'mean' or 'raw', got {aggregation!r}")


def export_gates(trace: GateTrace, path, aggregation: str = "mean") -> int:
    """Write the trace as CSV; returns the number of data rows."""
    rows = gate_rows(trace, aggregation)
    header = MEAN_HEADER if aggregation == "mean" else RAW_HEADER
    with open(Path(path), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([*row[:-1], f"{row[-1]:.6f}"])
    return len(rows)


def read_gates(path) -> list[dict]:
    with open(Path(path), newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) not in (MEAN_HEADER, RAW_HEADER):
            raise ConfigError(f"{path}: unrecognised gate CSV header {reader.fieldnames}")
        return [{k: (float(v) if k == "weight" else int(v)) for k, v in row.items()} for row in reader]
