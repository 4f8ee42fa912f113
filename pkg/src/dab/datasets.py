"""Synthetic generators and CSV input/output.

CSV files carry a header; feature columns are named ``x0, x1, ...`` by the
writers here and the target column (if any) is ``y``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-12


class DataError(ValueError):
    pass


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[1] != self.mean.size:
            raise DataError(f"expected {self.mean.size} feature columns, got {features.shape[1]}")
        return (features - self.mean) / self.std


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray | None = None
    num_classes: int | None = None
    normalization: Normalization | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        n = self.features.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one row")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
            if self.targets.size != n:
                raise DataError(f"{n} feature rows but {self.targets.size} targets")
            if not np.all(np.isfinite(self.targets)):
                raise DataError("targets contain non-finite values")
            if self.num_classes is not None:
                t = self.targets
                if np.any(t != np.round(t)) or np.any(t < 0) or np.any(t >= self.num_classes):
                    raise DataError(f"class labels must be integers in [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return self.targets.astype(np.int64)


def _grid_targets(x):
    return x ** 3


def gen_cubic(seed: int, n_train: int = 20, noise_std: float = 3.0, n_test: int = 201):
    """x ~ U[-4, 4], y = x^3 + eps with eps ~ N(0, noise_std^2).

    The test set is an even grid over [-5, 5] labelled with the noise-free
    curve.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-4.0, 4.0, size=n_train)
    y = x ** 3 + noise_std * rng.normal(size=n_train)
    grid = np.linspace(-5.0, 5.0, n_test)
    return Dataset(x[:, None], y), Dataset(grid[:, None], _grid_targets(grid))


def gen_two_clusters(seed: int, n_per_cluster: int = 10, noise_std: float = 3.0,
                     n_test: int = 241):
    """Half the points from U[-5, -2], half from U[2, 5]; test grid over [-6, 6]."""
    rng = np.random.default_rng(seed)
    left = rng.uniform(-5.0, -2.0, size=n_per_cluster)
    right = rng.uniform(2.0, 5.0, size=n_per_cluster)
    x = np.concatenate([left, right])
    y = x ** 3 + noise_std * rng.normal(size=x.size)
    grid = np.linspace(-6.0, 6.0, n_test)
    return Dataset(x[:, None], y), Dataset(grid[:, None], _grid_targets(grid))


def gen_blobs(seed: int, centers, stddev: float, n_per_center: int, ood_center,
              ood_n: int, n_test_per_center: int | None = None):
    """Isotropic Gaussian blobs labelled by blob index, plus an unlabelled OOD blob.

    Returns (train, in-distribution test, OOD test).
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] < 2:
        raise DataError("need at least two blob centers")
    ood_center = np.asarray(ood_center, dtype=np.float64).reshape(-1)
    if ood_center.size != centers.shape[1]:
        raise DataError("ood_center has the wrong dimension")
    n_test = n_per_center if n_test_per_center is None else n_test_per_center
    rng = np.random.default_rng(seed)
    c, d = centers.shape

    def draw(n):
        x = np.concatenate([mu + stddev * rng.normal(size=(n, d)) for mu in centers])
        y = np.repeat(np.arange(c), n)
        return x, y

    x_tr, y_tr = draw(n_per_center)
    x_te, y_te = draw(n_test)
    x_ood = ood_center + stddev * rng.normal(size=(ood_n, d))
    return (Dataset(x_tr, y_tr, num_classes=c), Dataset(x_te, y_te, num_classes=c),
            Dataset(x_ood))


GENERATORS = ("cubic", "two-clusters", "blobs")


# CSV -----------------------------------------------------------------------


def fit_normalization(features) -> Normalization:
    features = np.asarray(features, dtype=np.float64)
    return Normalization(features.mean(axis=0), np.maximum(features.std(axis=0), STD_FLOOR))


def normalize(ds: Dataset, stats: Normalization | None = None) -> Dataset:
    """Z-score the features, fitting stats on ``ds`` unless given."""
    stats = stats or fit_normalization(ds.features)
    return Dataset(stats.apply(ds.features), ds.targets, ds.num_classes, stats)


def load_csv(path, target: str | None = "y", normalize_features: bool = False,
             num_classes: int | None = None, stats: Normalization | None = None) -> Dataset:
    """Read a rectangular numeric CSV with a header row.

    ``target=None`` reads an unlabelled file.  With ``normalize_features``
    the features are z-scored using ``stats`` if given, else stats fitted on
    this file (stored on the returned dataset for reuse).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise DataError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    if target is not None:
        if target not in header:
            raise DataError(f"{path}: target column {target!r} not in header {header}")
        t = header.index(target)
        feats = np.delete(table, t, axis=1)
        targets = table[:, t]
    else:
        feats, targets = table, None
    ds = Dataset(feats, targets, num_classes)
    if normalize_features:
        ds = normalize(ds, stats)
    return ds


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def write_csv(path, ds: Dataset, extra: dict[str, np.ndarray] | None = None):
    """Write features as x0..x{d-1}, then ``y`` if labelled, then extra columns.

    ``path`` may also be an open text stream.
    """
    cols = [f"x{j}" for j in range(ds.width)]
    data = [ds.features[:, j] for j in range(ds.width)]
    if ds.targets is not None:
        cols.append("y")
        data.append(ds.labels if ds.num_classes is not None else ds.targets)
    for name, values in (extra or {}).items():
        cols.append(name)
        data.append(np.asarray(values))
    if hasattr(path, "write"):
        _write_rows(path, cols, data, len(ds))
    else:
        with Path(path).open("w", newline="") as fh:
            _write_rows(fh, cols, data, len(ds))


def _write_rows(fh, cols, data, n):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)
    for i in range(n):
        w.writerow([_fmt(col[i]) for col in data])


def _fmt(v):
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))
