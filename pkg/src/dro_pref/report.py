"""Per-iteration training report and its CSV form."""
import csv
import io as _io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import ParseError

REPORT_SCHEMA = "dro-pref/report/v1"

COLUMNS = (
    "iter",
    "robust_minibatch_loss",
    "uniform_minibatch_loss",
    "grad_norm",
    "mass_moved",
    "potential_or_nan",
    "fisher_min_eig",
    "compat_loss",
    "concentrability",
    "wallclock_ms",
)


@dataclass
class TrainReport:
    """Column-oriented log. For policy runs the two loss columns hold the
    worst-case weighted and the uniform minibatch *values* instead."""
    columns: dict
    meta: dict = field(default_factory=dict)
    iterates: np.ndarray = None

    @classmethod
    def empty(cls, T, meta=None):
        cols = {c: np.full(T, np.nan) for c in COLUMNS}
        cols["iter"] = np.arange(1, T + 1, dtype=float)
        return cls(cols, dict(meta or {}))

    def __len__(self):
        return len(self.columns["iter"])

    def __getitem__(self, name):
        return self.columns[name]

    def to_csv_text(self):
        buf = _io.StringIO()
        buf.write(f"# schema={REPORT_SCHEMA}\n")
        for k, v in self.meta.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        data = np.column_stack([self.columns[c] for c in COLUMNS])
        for i, row in enumerate(data):
            w.writerow([str(i + 1)] + [io.format_float(v) for v in row[1:]])
        return buf.getvalue()

    def to_csv(self, path):
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def from_csv(cls, path):
        meta, lines = {}, []
        for line in Path(path).read_text().splitlines():
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
            elif line:
                lines.append(line)
        if meta.pop("schema", None) != REPORT_SCHEMA or not lines:
            raise ParseError(f"{path}: not a training report")
        rows = list(csv.reader(lines))
        if tuple(rows[0]) != COLUMNS:
            raise ParseError(f"{path}: unexpected columns {rows[0]}")
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(COLUMNS))
        except ValueError as e:
            raise ParseError(f"{path}: {e}") from None
        return cls({c: data[:, j] for j, c in enumerate(COLUMNS)}, meta)
