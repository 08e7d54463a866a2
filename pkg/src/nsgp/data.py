"""Gridded-data ingestion, splits, regime clustering, synthetic benchmarks, and metrics.

Everything here is plain numpy; predictive distributions arrive from the
model modules and are only read. Metrics are computed in the original
target space, so callers denormalize predictions first.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math

import numpy as np

from .exceptions import (
    DegenerateSplit,
    DimensionMismatch,
    EmptyDataset,
    KTooLarge,
    ParseError,
)

COLUMNS = ("time", "lat", "lon", "value")


@dataclasses.dataclass
class Affine:
    """Reversible per-column standardization."""

    mean: np.ndarray
    std: np.ndarray

    def forward(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_affine(x) -> Affine:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    std = x.std(axis=0)
    return Affine(mean=x.mean(axis=0), std=np.where(std > 0, std, 1.0))


@dataclasses.dataclass
class Dataset:
    """Rows of (time, lat, lon, value) with split and regime metadata."""

    time: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    value: np.ndarray
    n_rejected: int = 0
    train_mask: np.ndarray = None
    regime_labels: np.ndarray = None

    def __len__(self):
        return self.value.shape[0]

    def inputs(self, columns):
        """Stack named columns into an (N, D) input matrix."""
        return np.stack([getattr(self, c) for c in columns], axis=1)

    def subset(self, mask):
        return Dataset(
            time=self.time[mask],
            lat=self.lat[mask],
            lon=self.lon[mask],
            value=self.value[mask],
            n_rejected=self.n_rejected,
            train_mask=None if self.train_mask is None else self.train_mask[mask],
            regime_labels=None if self.regime_labels is None else self.regime_labels[mask],
        )

    def train(self):
        if self.train_mask is None:
            raise DegenerateSplit("dataset has no split assignment")
        return self.subset(self.train_mask)

    def test(self):
        if self.train_mask is None:
            raise DegenerateSplit("dataset has no split assignment")
        return self.subset(~self.train_mask)

    def fingerprint(self):
        rows = np.stack([self.time, self.lat, self.lon, self.value], axis=1)
        digest = hashlib.sha256(np.ascontiguousarray(rows).tobytes()).hexdigest()
        return {"rows": int(len(self)), "sha256": digest}


def from_arrays(time, lat, lon, value) -> Dataset:
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1) for a in (time, lat, lon, value)]
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise DimensionMismatch("dataset columns have unequal lengths")
    if n == 0:
        raise EmptyDataset("no rows")
    return Dataset(*arrays)


def load_csv(path, column_map=None) -> Dataset:
    """Read a headered CSV; rows with non-finite values are dropped and counted.

    column_map renames file headers to the canonical (time, lat, lon, value)
    columns, e.g. {"time": "month", "value": "precip"}.
    """
    column_map = dict(column_map or {})
    names = {c: column_map.get(c, c) for c in COLUMNS}
    kept = {c: [] for c in COLUMNS}
    rejected = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("file is empty (no header row)")
        for canonical, header in names.items():
            if header not in reader.fieldnames:
                raise ParseError(f"missing mapped column '{header}' (for {canonical})")
        for lineno, row in enumerate(reader, start=2):
            parsed = {}
            for canonical, header in names.items():
                raw = row.get(header)
                if raw is None or raw.strip() == "":
                    raise ParseError(f"empty field '{header}'", line=lineno)
                try:
                    parsed[canonical] = float(raw)
                except ValueError as exc:
                    raise ParseError(f"cannot parse '{raw}' in column '{header}'", line=lineno) from exc
            if all(math.isfinite(v) for v in parsed.values()):
                for c in COLUMNS:
                    kept[c].append(parsed[c])
            else:
                rejected += 1
    if not kept["value"]:
        raise EmptyDataset(f"no finite rows in {path} ({rejected} rejected)")
    ds = from_arrays(kept["time"], kept["lat"], kept["lon"], kept["value"])
    ds.n_rejected = rejected
    return ds


def split(dataset: Dataset, strategy) -> Dataset:
    """Assign train/test rows.

    strategy is {"strategy": "random", "fraction": f, "seed": s} or
    {"strategy": "temporal", "cutoff": t} (train iff time < cutoff).
    """
    kind = strategy.get("strategy")
    if kind == "random":
        rng = np.random.default_rng(int(strategy["seed"]))
        mask = rng.random(len(dataset)) < float(strategy["fraction"])
    elif kind == "temporal":
        mask = dataset.time < float(strategy["cutoff"])
    else:
        raise ValueError(f"unknown split strategy '{kind}'")
    if not mask.any() or mask.all():
        raise DegenerateSplit(f"{kind} split left one side empty")
    out = dataset.subset(np.ones(len(dataset), dtype=bool))
    out.train_mask = mask
    return out


# ---------------------------------------------------------------------------
# k-means


@dataclasses.dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia_history: list


def kmeans(points, k, seed, max_iters=100) -> KMeansResult:
    """Seeded k-means++ initialization followed by Lloyd's iterations.

    Runs to an assignment fixed point or max_iters; the recorded
    within-cluster sum of squares is non-increasing per iteration.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > np.unique(points, axis=0).shape[0]:
        raise KTooLarge(f"k={k} exceeds the {np.unique(points, axis=0).shape[0]} distinct points")
    rng = np.random.default_rng(int(seed))
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[j] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=int)
    history = []
    for _ in range(max_iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        new_labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), new_labels].sum()))
        for j in range(k):
            sel = new_labels == j
            if sel.any():
                centers[j] = points[sel].mean(axis=0)
        if (new_labels == labels).all() and len(history) > 1:
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(labels=labels, centers=centers, inertia_history=history)


def kmeans_regimes(dataset: Dataset, k, seed):
    """Cluster spatial cells by their 12-month climatology.

    Returns (cells (C,2) lat/lon, labels (C,), per-row labels (N,)). The
    feature vector per cell is the mean seasonal cycle of its values.
    """
    cells, cell_idx = np.unique(
        np.stack([dataset.lat, dataset.lon], axis=1), axis=0, return_inverse=True
    )
    months = np.rint(dataset.time).astype(int) % 12
    features = np.zeros((cells.shape[0], 12))
    counts = np.zeros((cells.shape[0], 12))
    np.add.at(features, (cell_idx, months), dataset.value)
    np.add.at(counts, (cell_idx, months), 1.0)
    features = features / np.where(counts > 0, counts, 1.0)
    if k > cells.shape[0]:
        raise KTooLarge(f"k={k} exceeds the {cells.shape[0]} spatial cells")
    result = kmeans(features, k, seed)
    return cells, result.labels, result.labels[cell_idx]


# ---------------------------------------------------------------------------
# metrics


def rmse(pred_mean, targets):
    """Root mean squared error."""
    pred_mean = np.asarray(pred_mean, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if pred_mean.shape != targets.shape or pred_mean.size == 0:
        raise DimensionMismatch(f"{pred_mean.shape} predictions vs {targets.shape} targets")
    return float(np.sqrt(np.mean((pred_mean - targets) ** 2)))


def _gaussian_logpdf(y, mean, var):
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * (y - mean) ** 2 / var


def nlpd(pred, targets, include_jacobian=True):
    """Mean negative log predictive density of held-out targets.

    Gaussian-mixture predictives (from Monte-Carlo latent draws) are scored
    with an exact log-mean-exp over component densities. For log-normal
    predictives the density is evaluated on log targets plus the change of
    variables term +log y (disable via include_jacobian for comparison with
    conventions that skip it).
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    mean = np.asarray(pred.mean, dtype=np.float64).reshape(-1)
    var = np.asarray(pred.var, dtype=np.float64).reshape(-1)
    if mean.shape != targets.shape:
        raise DimensionMismatch(f"{mean.shape} predictions vs {targets.shape} targets")
    if np.any(var <= 0):
        raise ValueError("predictive variances must be positive for NLPD")
    if pred.transform == "lognormal":
        if np.any(targets <= 0):
            raise ValueError("log-normal NLPD requires positive targets")
        z = np.log(targets)
        logp = _gaussian_logpdf(z, mean, var)
        if include_jacobian:
            logp = logp - z
        return float(-np.mean(logp))
    if pred.components is not None:
        comp_means = np.asarray(pred.components[0], dtype=np.float64)
        comp_vars = np.asarray(pred.components[1], dtype=np.float64)
        logps = _gaussian_logpdf(targets[None, :], comp_means, comp_vars)
        m = logps.max(axis=0)
        logp = m + np.log(np.mean(np.exp(logps - m), axis=0))
        return float(-np.mean(logp))
    return float(-np.mean(_gaussian_logpdf(targets, mean, var)))


# ---------------------------------------------------------------------------
# synthetic non-stationary benchmark


@dataclasses.dataclass
class SynthResult:
    dataset: Dataset
    true_log_lengthscale: np.ndarray  # per row
    latent_function: np.ndarray       # noise-free values


def _lengthscale_profile(x, profile):
    if profile == "piecewise":
        return np.where(x < 0.5, 0.25, 0.04)
    if profile == "smooth":
        return np.exp(-1.8 + 1.2 * np.sin(2.0 * np.pi * x))
    raise ValueError(f"unknown lengthscale profile '{profile}'")


def synth_nonstationary(n_points=200, profile="piecewise", noise=0.1, seed=0) -> SynthResult:
    """Draw a 1D function from a Gibbs-kernel GP with a known lengthscale field.

    Inputs live in [0, 1] and are stored in the lon column (time and lat are
    zero). Returns the dataset together with the generating field for
    recovery diagnostics.
    """
    if n_points < 10:
        raise ValueError("n_points must be >= 10")
    rng = np.random.default_rng(int(seed))
    x = np.sort(rng.uniform(0.0, 1.0, n_points))
    ell = _lengthscale_profile(x, profile)
    s = ell[:, None] ** 2 + ell[None, :] ** 2
    pref = np.sqrt(2.0 * ell[:, None] * ell[None, :] / s)
    k = pref * np.exp(-((x[:, None] - x[None, :]) ** 2) / s)
    chol = np.linalg.cholesky(k + 1e-10 * np.eye(n_points))
    f = chol @ rng.standard_normal(n_points)
    y = f + noise * rng.standard_normal(n_points)
    ds = from_arrays(np.zeros(n_points), np.zeros(n_points), x, y)
    return SynthResult(dataset=ds, true_log_lengthscale=np.log(ell), latent_function=f)
