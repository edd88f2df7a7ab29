"""Dataset loading, train/test splitting and normalization, bundled synthetic data."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .linalg import RandomStream

SNELSON_ENV = "DKGP_SNELSON_PATH"


class DataParseError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray  # floats for regression, ints for classification
    name: str = ""
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if not np.all(np.isfinite(self.X)) or (self.is_regression and not np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def is_regression(self) -> bool:
        return np.issubdtype(self.y.dtype, np.floating)


def _parse_rows(text: str, source: str, delimiter: str | None):
    rows = []
    if delimiter is None:
        for lineno, line in enumerate(text.splitlines(), start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            rows.append((lineno, s.split()))
    else:
        for lineno, row in enumerate(csv.reader(io.StringIO(text), delimiter=delimiter), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((lineno, [c.strip() for c in row]))
    if not rows:
        raise DataParseError(f"{source}: no data")
    return rows


def _to_floats(rows, source: str, width: int) -> np.ndarray:
    out = np.empty((len(rows), width))
    for i, (lineno, cells) in enumerate(rows):
        if len(cells) != width:
            raise DataParseError(f"{source}:{lineno}: expected {width} fields, found {len(cells)}")
        try:
            out[i] = [float(c) for c in cells]
        except ValueError as exc:
            raise DataParseError(f"{source}:{lineno}: {exc}") from None
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out))[0, 0])
        raise DataParseError(f"{source}:{rows[bad][0]}: non-finite value")
    return out


def _is_header(cells) -> bool:
    try:
        [float(c) for c in cells]
    except ValueError:
        return True
    return False


def load_dataset(path, fmt: str = "csv", target: str | int | None = None, classification: bool = False) -> Dataset:
    """Read raw values; no normalization is applied.

    ``fmt="csv"``: comma-separated with an optional header row; ``target`` is
    a column name or index (default: the last column).
    ``fmt="snelson"``: whitespace-separated two-column text (x, y), or a
    directory holding ``train_inputs`` and ``train_outputs`` files.
    """
    path = Path(path)
    if fmt == "snelson":
        return _load_snelson(path)
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    text = path.read_text()
    rows = _parse_rows(text, str(path), ",")
    header = None
    if _is_header(rows[0][1]):
        header = rows[0][1]
        rows = rows[1:]
        if not rows:
            raise DataParseError(f"{path}: header but no data")
    width = len(header) if header else len(rows[0][1])
    values = _to_floats(rows, str(path), width)
    if target is None:
        col = width - 1
    elif isinstance(target, str):
        if header is None or target not in header:
            raise KeyError(f"{path}: no target column {target!r}")
        col = header.index(target)
    else:
        col = int(target)
        if not -width <= col < width:
            raise KeyError(f"{path}: target column {col} out of range")
        col %= width
    y = values[:, col]
    X = np.delete(values, col, axis=1)
    if classification:
        if not np.all(y == np.round(y)) or np.any(y < 0):
            raise DataParseError(f"{path}: class labels must be nonnegative integers")
        y = y.astype(int)
    return Dataset(X, y, path.stem)


def _load_snelson(path: Path) -> Dataset:
    if path.is_dir():
        xs = _to_floats(_parse_rows((path / "train_inputs").read_text(), str(path / "train_inputs"), None), str(path), 1)
        ys = _to_floats(_parse_rows((path / "train_outputs").read_text(), str(path / "train_outputs"), None), str(path), 1)
        if xs.shape != ys.shape:
            raise DataParseError(f"{path}: inputs and outputs differ in length")
        return Dataset(xs, ys[:, 0], "snelson")
    values = _to_floats(_parse_rows(path.read_text(), str(path), None), str(path), 2)
    return Dataset(values[:, :1], values[:, 1], path.stem)


def _normalize(d: Dataset, xm, xs, ym, ys) -> Dataset:
    safe = np.where(xs > 0, xs, 1.0)
    X = np.where(xs > 0, (d.X - xm) / safe, 0.0)
    y = (d.y - ym) / ys if d.is_regression else d.y
    return replace(d, X=X, y=y, x_mean=xm, x_std=xs, y_mean=ym, y_std=ys)


def normalization_stats(d: Dataset):
    xm = d.X.mean(axis=0)
    xs = d.X.std(axis=0)
    if d.is_regression:
        ym, ys = float(d.y.mean()), float(d.y.std())
        if ys == 0:
            ys = 1.0
    else:
        ym, ys = 0.0, 1.0
    return xm, xs, ym, ys


def normalize_with(d: Dataset, ref: Dataset) -> Dataset:
    """Normalize ``d`` with the statistics stored on ``ref``."""
    return _normalize(d, ref.x_mean, ref.x_std, ref.y_mean, ref.y_std)


def split_and_normalize(d: Dataset, test_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffle by seed, standardize both splits with train-split statistics."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(test_fraction * d.n))
    if n_test < 1 or n_test >= d.n:
        raise ValueError(f"N={d.n} is too small for a nonempty split")
    perm = RandomStream(seed).split(17).permutation(d.n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    train = replace(d, X=d.X[train_idx], y=d.y[train_idx])
    test = replace(d, X=d.X[test_idx], y=d.y[test_idx])
    stats = normalization_stats(train)
    return _normalize(train, *stats), _normalize(test, *stats)


def normalize_all(d: Dataset) -> Dataset:
    return _normalize(d, *normalization_stats(d))


def subsample(d: Dataset, n: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random ``n`` rows and the remaining rows."""
    if not 0 < n <= d.n:
        raise ValueError(f"cannot take {n} of {d.n} rows")
    perm = RandomStream(seed).split(23).permutation(d.n)
    a, b = np.sort(perm[:n]), np.sort(perm[n:])
    return replace(d, X=d.X[a], y=d.y[a]), replace(d, X=d.X[b], y=d.y[b])


# ---------------------------------------------------------------------------
# synthetic and bundled data


def toy_1d(n: int = 200, seed: int = 0, noise_std: float = 0.3) -> Dataset:
    """Snelson-like 1-D regression: inputs on [0, 6], smooth target plus noise."""
    s = RandomStream(seed)
    x = np.sort(s.split(0).uniform(0.0, 6.0, size=n))
    f = np.sin(2.5 * x) + 0.5 * np.sin(0.6 * x)
    y = f + noise_std * s.split(1).normal(n)
    return Dataset(x[:, None], y, "toy1d")


def synthetic_regression(n: int = 400, dim: int = 6, seed: int = 0, noise_std: float = 0.25) -> Dataset:
    """Additive nonlinear target on standard-normal inputs."""
    if dim < 6:
        raise ValueError("synthetic regression needs at least 6 inputs")
    s = RandomStream(seed)
    X = s.split(0).normal((n, dim))
    f = np.sin(2 * X[:, 0]) + X[:, 1] * X[:, 2] + 0.5 * X[:, 3] ** 2 - np.cos(X[:, 4]) + 0.3 * X[:, 5]
    y = f + noise_std * s.split(1).normal(n)
    return Dataset(X, y, "synthetic_regression")


def gaussian_blobs(n: int = 300, classes: int = 3, seed: int = 0, spread: float = 0.8) -> Dataset:
    """2-D classification: equal-size isotropic blobs with centers on a circle."""
    s = RandomStream(seed)
    labels = np.arange(n) % classes
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    X = centers[labels] + spread * s.split(0).normal((n, 2))
    return Dataset(X, labels, "blobs")


BUNDLED = {
    "toy1d": ("toy1d.csv", toy_1d, False),
    "synthetic_regression": ("synthetic_regression.csv", synthetic_regression, False),
    "blobs": ("blobs.csv", gaussian_blobs, True),
}


def write_csv(path, d: Dataset) -> None:
    cols = [f"x{i}" for i in range(d.dim)] + ["y"]
    lines = [",".join(cols)]
    for xi, yi in zip(d.X, d.y):
        lines.append(",".join([*(repr(float(v)) for v in xi), repr(int(yi)) if not d.is_regression else repr(float(yi))]))
    Path(path).write_text("\n".join(lines) + "\n")


def bundled_path(name: str) -> Path:
    fname = BUNDLED[name][0]
    return Path(str(resources.files("dkgp") / "data" / fname))


def load_bundled(name: str) -> Dataset:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled dataset {name!r}; choose from {sorted(BUNDLED)}")
    d = load_dataset(bundled_path(name), "csv", "y", classification=BUNDLED[name][2])
    return replace(d, name=name)


def snelson_path() -> Path | None:
    """Location of the real 200-point Snelson data, if supplied via the environment."""
    p = os.environ.get(SNELSON_ENV)
    return Path(p) if p and Path(p).exists() else None


def load_toy() -> tuple[Dataset, bool]:
    """The Snelson data when available, else the bundled stand-in; flag says which."""
    p = snelson_path()
    if p is not None:
        return replace(load_dataset(p, "snelson"), name="snelson"), True
    return load_bundled("toy1d"), False


def resolve_dataset(spec: str, classification: bool = False) -> Dataset:
    """``toy`` / a bundled name / ``snelson:<path>`` / ``csv:<path>`` / a CSV path."""
    if spec == "toy":
        return load_toy()[0]
    if spec in BUNDLED:
        return load_bundled(spec)
    if spec.startswith("snelson:"):
        return load_dataset(spec.split(":", 1)[1], "snelson")
    if spec.startswith("csv:"):
        spec = spec.split(":", 1)[1]
    return load_dataset(spec, "csv", classification=classification)
