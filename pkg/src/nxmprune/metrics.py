"""Append-only metric records and their CSV serialization.

Fixed column order: step, epoch, k, train_loss, aug_loss,
val_loss_pruned, residual, similarity, method, seed.  Floats are written
with 17 significant digits (lossless for float64) and absent values as
empty fields, so identical runs serialize to identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

COLUMNS = (
    "step",
    "epoch",
    "k",
    "train_loss",
    "aug_loss",
    "val_loss_pruned",
    "residual",
    "similarity",
    "method",
    "seed",
)


@dataclass
class MetricRow:
    step: int
    epoch: int
    k: int | None = None
    train_loss: float | None = None
    aug_loss: float | None = None
    val_loss_pruned: float | None = None
    residual: float | None = None
    similarity: float | None = None
    method: str = ""
    seed: int = 0


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


class MetricLog:
    """Ordered collection of metric rows for one run."""

    def __init__(self):
        self.rows: list[MetricRow] = []

    def append(self, **kwargs) -> MetricRow:
        row = MetricRow(**kwargs)
        self.rows.append(row)
        return row

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        """Non-null values of one column, in order."""
        return [v for row in self.rows if (v := getattr(row, name)) is not None]

    def to_csv(self) -> str:
        lines = [",".join(COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_format(getattr(row, f.name)) for f in fields(MetricRow)))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def read_csv(path) -> list[dict]:
    """Parse a metrics CSV back into dicts (floats where possible, None for empties)."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        row: dict = {}
        for key, cell in zip(header, line.split(",")):
            if cell == "":
                row[key] = None
            elif key in ("step", "epoch", "k", "seed"):
                row[key] = int(cell)
            elif key == "method":
                row[key] = cell
            else:
                row[key] = float(cell)
        out.append(row)
    return out
