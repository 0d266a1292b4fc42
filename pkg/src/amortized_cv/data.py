"""Datasets, CSV ingestion, synthetic logistic data and mini-batch sampling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

STD_FLOOR = 1e-12


class DataError(ValueError):
    """Malformed input file; the message carries the row/column location."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # standardized, [N, D_x]
    targets: np.ndarray  # [N]
    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple = ()
    target_name: str = "y"

    @property
    def N(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def destandardize(self, features=None):
        z = self.features if features is None else np.asarray(features, dtype=float)
        return z * self.std + self.mean


def standardize(raw, **kwargs):
    """Z-score columns; constant columns map to zero (std clamped to one)."""
    raw = np.asarray(raw, dtype=float)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std < STD_FLOOR * np.maximum(1.0, np.abs(mean)), 1.0, std)
    return Dataset((raw - mean) / std, np.asarray(kwargs.pop("targets")), mean, std, **kwargs)


def load_csv(path, target=None, delimiter=","):
    """Read a numeric CSV with a header row; the last column is the target
    unless ``target`` names another one. Rows with empty cells are rejected."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            values = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if not cell:
                    raise DataError(f"{path}:{lineno}: missing value in column {header[col]!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column {header[col]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: non-finite value in column {header[col]!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows)
    t_col = len(header) - 1 if target is None else header.index(target) if target in header else None
    if t_col is None:
        raise DataError(f"{path}: no column named {target!r}")
    f_cols = [j for j in range(len(header)) if j != t_col]
    return standardize(table[:, f_cols], targets=table[:, t_col],
                       feature_names=tuple(header[j] for j in f_cols),
                       target_name=header[t_col])


def write_csv(dataset, path, standardized=True):
    feats = dataset.features if standardized else dataset.destandardize()
    names = list(dataset.feature_names) or [f"x{j}" for j in range(dataset.dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + [dataset.target_name])
        for row, t in zip(feats, dataset.targets):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def synth_logreg(seed, N=500, dim=8, cluster_count=4, weight_scale=0.3,
                 cluster_spread=3.0, offset=4.0):
    """Clustered Gaussian features with logistic labels.

    Raw features are ``offset + center_k + scale_k * noise`` with cluster
    centers of spread ``cluster_spread`` and per-cluster axis scales, so
    per-datum gradients differ strongly across the data while sharing the
    common ``offset`` direction. Labels are drawn from ``sigmoid(x'w)`` on
    the standardized features with ``w ~ N(0, weight_scale^2 I / dim)``.
    ``dataset.destandardize()`` recovers the raw features.

    Returns ``(dataset, weights)``.
    """
    if not (N >= cluster_count >= 1):
        raise ValueError("need N >= cluster_count >= 1")
    rng = np.random.default_rng(seed)
    centers = cluster_spread * rng.standard_normal((cluster_count, dim))
    scales = rng.uniform(0.3, 1.5, size=(cluster_count, dim))
    assign = rng.integers(cluster_count, size=N)
    raw = offset + centers[assign] + scales[assign] * rng.standard_normal((N, dim))
    weights = weight_scale * rng.standard_normal(dim) / math.sqrt(dim)
    ds = standardize(raw, targets=np.zeros(N),
                     feature_names=tuple(f"x{j}" for j in range(dim)), target_name="y")
    labels = (rng.uniform(size=N) < expit(ds.features @ weights)).astype(float)
    return Dataset(ds.features, labels, ds.mean, ds.std, ds.feature_names, "y"), weights


def sample_minibatch(rng, N, size):
    """Indices drawn uniformly without replacement within the batch."""
    if not (1 <= size <= N):
        raise ValueError(f"batch size must be in [1, {N}], got {size}")
    return rng.choice(N, size=size, replace=False)
