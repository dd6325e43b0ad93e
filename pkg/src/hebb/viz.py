"""File-based visualizers and loggers: weight grids, unit convergence,
metrics CSV, and per-layer weight statistics.

Images are written as binary P5 graymaps: trivially parseable, so tests
can assert exact bytes. Metric CSVs serialize floats with `repr`, which
round-trips float64 losslessly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .engine import Event, EventKind, MetricsRow, RunRecord
from .errors import ConfigError, DimensionError
from .tensorcore import RngState

METRICS_HEADER = ("phase", "epoch", "lr", "loss", "accuracy", "seconds")
LAYER_STATS_HEADER = ("phase", "epoch", "layer", "param", "min", "max",
                      "mean", "std")


@dataclass
class WeightGridSpec:
    """Sampling and tiling description for a weight-grid image."""

    unit_shape: tuple[int, ...]
    rows: int
    cols: int
    sample_count: int
    rng: RngState

    def __post_init__(self):
        if self.rows * self.cols < self.sample_count:
            raise ConfigError(
                f"{self.rows}x{self.cols} grid cannot hold "
                f"{self.sample_count} units"
            )


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 graymap from a 2-D uint8 array."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ConfigError(f"{path} is not a P5 graymap written by this package")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _unit_tile(row: np.ndarray, unit_shape: tuple[int, ...]) -> np.ndarray:
    """Min-max normalize one unit's weights to [0,255]; flat units map to 128."""
    unit = row.reshape(unit_shape)
    if unit.ndim == 3:
        # channels rendered side by side
        unit = np.concatenate(list(unit), axis=1)
    lo, hi = unit.min(), unit.max()
    if hi == lo:
        return np.full(unit.shape, 128, dtype=np.uint8)
    return np.round((unit - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_weight_grid(weights: np.ndarray, spec: WeightGridSpec, path) -> None:
    """Sample units, tile them into a grid with 1-pixel separators, write P5."""
    weights = np.asarray(weights)
    d = int(np.prod(spec.unit_shape))
    if weights.ndim != 2 or weights.shape[1] != d:
        raise DimensionError(
            f"weights {weights.shape} do not match unit shape {spec.unit_shape} "
            f"({d} values)"
        )
    chosen = spec.rng.sample_indices(weights.shape[0], spec.sample_count)
    th = spec.unit_shape[-2]
    tw = spec.unit_shape[-1] * (spec.unit_shape[0] if len(spec.unit_shape) == 3 else 1)
    grid = np.zeros((spec.rows * th + spec.rows - 1,
                     spec.cols * tw + spec.cols - 1), dtype=np.uint8)
    for slot, unit_index in enumerate(chosen):
        r, c = divmod(slot, spec.cols)
        tile = _unit_tile(weights[unit_index], spec.unit_shape)
        grid[r * (th + 1): r * (th + 1) + th,
             c * (tw + 1): c * (tw + 1) + tw] = tile
    write_pgm(path, grid)


def unit_convergence(weights: np.ndarray, p: float) -> np.ndarray:
    """Per-unit distance from the rule's fixed-point norm: |1 - sum |W|^p|."""
    if p < 2:
        raise ConfigError(f"p must be >= 2, got {p}")
    weights = np.asarray(weights)
    return np.abs(1.0 - (np.abs(weights) ** p).sum(axis=1))


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _row_cells(row: MetricsRow) -> list[str]:
    return [row.phase, str(row.epoch), _format_cell(float(row.lr)),
            _format_cell(row.loss), _format_cell(row.accuracy),
            _format_cell(float(row.seconds))]


def log_metrics(record: RunRecord, path) -> None:
    """Write the whole record as CSV with the fixed metrics header."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for row in record.rows:
            writer.writerow(_row_cells(row))


def read_metrics(path) -> list[MetricsRow]:
    """Parse a metrics CSV back into rows (lossless for finite values)."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected header {header}")
        for cells in reader:
            phase, epoch, lr, loss, acc, seconds = cells
            rows.append(MetricsRow(
                phase, int(epoch), float(lr),
                float(loss) if loss else None,
                float(acc) if acc else None,
                float(seconds),
            ))
    return rows


class MetricsCsvHandler:
    """EPOCH_COMPLETED handler that appends one metrics row per epoch.

    Each row is flushed as a single write, so a crashed run leaves a
    readable prefix rather than a torn line.
    """

    def __init__(self, path):
        self.path = path
        self._header_written = False

    def attach(self, trainer) -> None:
        trainer.register_handler(EventKind.EPOCH_COMPLETED, self)

    def __call__(self, event: Event) -> None:
        row = event.metrics["row"]
        line = io.StringIO()
        writer = csv.writer(line)
        if not self._header_written:
            writer.writerow(METRICS_HEADER)
            self._header_written = True
        writer.writerow(_row_cells(row))
        with open(self.path, "a", newline="") as f:
            f.write(line.getvalue())
            f.flush()


class LayerStatsCsvHandler:
    """EPOCH_COMPLETED handler logging min/max/mean/std per parameter."""

    def __init__(self, path, phase: str, *, header: bool = True):
        self.path = path
        self.phase = phase
        self._header_written = not header

    def attach(self, trainer) -> None:
        trainer.register_handler(EventKind.EPOCH_COMPLETED, self)

    def __call__(self, event: Event) -> None:
        model = event.metrics["model"]
        line = io.StringIO()
        writer = csv.writer(line)
        if not self._header_written:
            writer.writerow(LAYER_STATS_HEADER)
            self._header_written = True
        for name, tensor in model.param_items():
            layer, param = name.split(".", 1)
            writer.writerow([
                self.phase, event.epoch, layer, param,
                repr(float(tensor.min())), repr(float(tensor.max())),
                repr(float(tensor.mean())), repr(float(tensor.std())),
            ])
        with open(self.path, "a", newline="") as f:
            f.write(line.getvalue())
            f.flush()
