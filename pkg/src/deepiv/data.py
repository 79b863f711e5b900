"""In-memory observational datasets and their CSV form.

CSV columns are ``x_<name>`` (covariates, numeric or categorical),
``z_<name>`` (numeric instruments), ``p`` (treatment) and ``y`` (outcome).
Categorical covariates are stored as integer codes; the code -> label table
lives in ``Dataset.categories`` so the file can be written back unchanged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError


def format_float(value: float) -> str:
    """17 significant digits: exact round trip for float64."""
    return "%.17g" % value


@dataclass
class Dataset:
    x: np.ndarray  # (n, d_x)
    z: np.ndarray  # (n, d_z)
    p: np.ndarray  # (n,)
    y: np.ndarray  # (n,)
    x_names: list[str]
    z_names: list[str]
    categories: dict[str, list[str]] = field(default_factory=dict)
    latent: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.p)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(n, -1)
        self.z = np.asarray(self.z, dtype=np.float64).reshape(n, -1)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(n)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(n)
        if self.x.shape[1] != len(self.x_names) or self.z.shape[1] != len(self.z_names):
            raise SchemaError("column names do not match array widths")
        if len(self.y) != n:
            raise SchemaError("p and y lengths differ")

    def __len__(self) -> int:
        return len(self.p)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.x[idx], self.z[idx], self.p[idx], self.y[idx],
            list(self.x_names), list(self.z_names), dict(self.categories),
            {k: v[idx] for k, v in self.latent.items()},
        )

    def split(self, fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        """Random split; the second part holds ``fraction`` of the rows."""
        n = len(self)
        order = rng.permutation(n)
        n_second = int(round(fraction * n))
        n_second = min(max(n_second, 1), n - 1)
        return self.subset(np.sort(order[n_second:])), self.subset(np.sort(order[:n_second]))

    def with_z(self, z: np.ndarray) -> "Dataset":
        return Dataset(self.x, z, self.p, self.y, list(self.x_names), list(self.z_names),
                       dict(self.categories), dict(self.latent))


def _is_number(text: str) -> bool:
    try:
        return np.isfinite(float(text))
    except ValueError:
        return False


def read_dataset(text: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError("empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names")
    x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
    z_cols = [i for i, h in enumerate(header) if h.startswith("z_")]
    unknown = [h for h in header if not (h.startswith(("x_", "z_")) or h in ("p", "y"))]
    if unknown:
        raise SchemaError(f"unknown columns {unknown}")
    if not z_cols:
        raise SchemaError("no instrument column (z_*)")
    if "p" not in header or "y" not in header:
        raise SchemaError("missing p or y column")
    if not body:
        raise SchemaError("no data rows")
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise SchemaError(f"line {r}: {len(row)} cells, header has {len(header)}")
        if any(cell.strip() == "" for cell in row):
            raise SchemaError(f"line {r}: missing cell")

    def numeric(col: int) -> np.ndarray:
        out = np.empty(len(body))
        for r, row in enumerate(body):
            if not _is_number(row[col]):
                raise SchemaError(f"line {r + 2}, column {header[col]}: non-numeric cell {row[col]!r}")
            out[r] = float(row[col])
        return out

    categories: dict[str, list[str]] = {}
    x = np.empty((len(body), len(x_cols)))
    for j, col in enumerate(x_cols):
        cells = [row[col] for row in body]
        if all(_is_number(c) for c in cells):
            x[:, j] = [float(c) for c in cells]
        else:
            labels = sorted(set(cells))
            code = {lab: k for k, lab in enumerate(labels)}
            categories[header[col][2:]] = labels
            x[:, j] = [code[c] for c in cells]
    z = np.column_stack([numeric(c) for c in z_cols])
    return Dataset(
        x, z, numeric(header.index("p")), numeric(header.index("y")),
        [header[c][2:] for c in x_cols], [header[c][2:] for c in z_cols], categories,
    )


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset CSV, enforcing the column schema."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return read_dataset(path.read_text())


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x_{n}" for n in data.x_names] + [f"z_{n}" for n in data.z_names] + ["p", "y"])
    for i in range(len(data)):
        cells = []
        for j, name in enumerate(data.x_names):
            if name in data.categories:
                cells.append(data.categories[name][int(data.x[i, j])])
            else:
                cells.append(format_float(data.x[i, j]))
        cells += [format_float(v) for v in data.z[i]]
        cells += [format_float(data.p[i]), format_float(data.y[i])]
        writer.writerow(cells)
    return buf.getvalue()


def save_dataset(data: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_csv(data))


def encode_design(data_x: np.ndarray, x_names: list[str], categories: dict[str, list[str]]) -> np.ndarray:
    """Covariate design with categorical columns one-hot encoded (first level dropped)."""
    blocks = []
    for j, name in enumerate(x_names):
        col = data_x[:, j]
        if name in categories:
            levels = len(categories[name])
            codes = col.astype(int)
            blocks.append(np.eye(levels)[codes][:, 1:])
        else:
            blocks.append(col[:, None])
    if not blocks:
        return np.empty((data_x.shape[0], 0))
    return np.hstack(blocks)
