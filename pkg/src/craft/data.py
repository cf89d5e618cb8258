"""Dataset container, CSV I/O, scaling, label masking, and synthetic generation.

A dataset bundles a feature matrix, a label vector, and a per-row labeled
mask.  Labels are only meaningful where the mask is set; unlabeled slots hold
NaN after loading (an empty CSV cell is the only file encoding of a missing
label).  Every randomized operation here is a pure function of its inputs and
a seed, so splits and masks are reproducible byte for byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "Dataset",
    "ScalerParams",
    "GeneratorSpec",
    "load_csv",
    "write_csv",
    "fit_scaler",
    "apply_scaler",
    "invert_scaler",
    "stratified_label_mask",
    "inject_marginal_bias",
    "generate_synthetic",
    "ground_truth",
]


def _frozen_array(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalerParams:
    """Affine feature/label scaling fitted on a training set.

    Features are z-scored per column.  Labels are mapped linearly so the
    fitted label range lands on [-1, 1]; values outside the fitted range map
    outside [-1, 1] without clipping.
    """

    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_lo: float
    label_hi: float

    def __post_init__(self):
        object.__setattr__(self, "feature_mean", _frozen_array(self.feature_mean))
        object.__setattr__(self, "feature_std", _frozen_array(self.feature_std))
        object.__setattr__(self, "label_lo", float(self.label_lo))
        object.__setattr__(self, "label_hi", float(self.label_hi))
        if self.feature_mean.ndim != 1 or self.feature_mean.shape != self.feature_std.shape:
            raise ValueError("feature_mean and feature_std must be 1-d and equally long")
        if np.any(self.feature_std <= 0):
            raise ValueError("feature_std entries must be positive")
        if not self.label_lo < self.label_hi:
            raise ValueError("label_lo must lie strictly below label_hi")

    def scale_labels(self, y):
        return 2.0 * (np.asarray(y, dtype=np.float64) - self.label_lo) / (self.label_hi - self.label_lo) - 1.0

    def unscale_labels(self, y):
        return (np.asarray(y, dtype=np.float64) + 1.0) * (self.label_hi - self.label_lo) / 2.0 + self.label_lo

    def to_dict(self):
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "label_lo": self.label_lo,
            "label_hi": self.label_hi,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature_mean"], d["feature_std"], d["label_lo"], d["label_hi"])


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix with a (possibly partial) label vector."""

    features: np.ndarray
    labels: np.ndarray
    labeled: np.ndarray
    meta: ScalerParams | None = None

    def __post_init__(self):
        feats = _frozen_array(self.features)
        labels = _frozen_array(self.labels)
        mask = _frozen_array(self.labeled, dtype=bool)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "labeled", mask)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError("features must be a non-empty 2-d matrix")
        n = feats.shape[0]
        if labels.shape != (n,) or mask.shape != (n,):
            raise ValueError("labels and labeled must be vectors matching the row count")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite entries")
        if not np.isfinite(labels[mask]).all():
            raise ValueError("every labeled row must carry a finite label")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_labeled(self) -> int:
        return int(self.labeled.sum())

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.labels[rows], self.labeled[rows], self.meta)


def _parse_cell(path, lineno, name, cell):
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: non-numeric value {cell!r} in column {name}") from None


def load_csv(path) -> Dataset:
    """Read a dataset from a ``f0,...,f{d-1},y[,labeled]`` CSV file.

    Without a ``labeled`` column every row counts as labeled.  An empty ``y``
    cell is allowed only on rows flagged unlabeled.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        has_mask = bool(header) and header[-1] == "labeled"
        d = len(header) - (2 if has_mask else 1)
        expected = [f"f{j}" for j in range(d)] + ["y"] + (["labeled"] if has_mask else [])
        if d < 1 or header != expected:
            raise ValueError(f"{path}: malformed header {header!r}; expected f0,...,f{{d-1}},y[,labeled]")
        feats, labels, mask = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            if has_mask:
                flag = row[-1].strip()
                if flag not in ("0", "1"):
                    raise ValueError(f"{path}:{lineno}: labeled flag must be 0 or 1, got {flag!r}")
                is_labeled = flag == "1"
            else:
                is_labeled = True
            y_cell = (row[-2] if has_mask else row[-1]).strip()
            if y_cell == "":
                if is_labeled:
                    raise ValueError(f"{path}:{lineno}: labeled sample missing label")
                y_val = math.nan
            else:
                y_val = _parse_cell(path, lineno, "y", y_cell)
            feats.append([_parse_cell(path, lineno, f"f{j}", c) for j, c in enumerate(row[:d])])
            labels.append(y_val)
            mask.append(is_labeled)
    if not feats:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels), np.array(mask, dtype=bool))


def write_csv(ds: Dataset, path) -> None:
    """Write a dataset in the same CSV format that :func:`load_csv` reads.

    Unlabeled rows get an empty ``y`` cell (their in-memory label, if any, is
    treated as hidden).  The ``labeled`` column is omitted when every row is
    labeled.
    """
    include_mask = not bool(ds.labeled.all())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = [f"f{j}" for j in range(ds.d)] + ["y"] + (["labeled"] if include_mask else [])
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]]
            row.append(repr(float(ds.labels[i])) if ds.labeled[i] else "")
            if include_mask:
                row.append("1" if ds.labeled[i] else "0")
            writer.writerow(row)


def fit_scaler(train: Dataset) -> ScalerParams:
    """Fit scaling statistics: feature moments on all rows, label range on labeled rows."""
    std = train.features.std(axis=0)
    bad = np.flatnonzero(std <= 0)
    if bad.size:
        raise ValueError(f"zero-variance feature column(s): {bad.tolist()}")
    labeled = train.labels[train.labeled]
    if labeled.size == 0:
        raise ValueError("cannot fit a label scaler without labeled rows")
    lo, hi = float(labeled.min()), float(labeled.max())
    if lo == hi:
        raise ValueError("all labels identical: label_lo equals label_hi")
    return ScalerParams(train.features.mean(axis=0), std, lo, hi)


def apply_scaler(ds: Dataset, params: ScalerParams) -> Dataset:
    feats = (ds.features - params.feature_mean) / params.feature_std
    labels = params.scale_labels(ds.labels)
    return Dataset(feats, labels, ds.labeled, params)


def invert_scaler(ds: Dataset, params: ScalerParams) -> Dataset:
    feats = ds.features * params.feature_std + params.feature_mean
    labels = params.unscale_labels(ds.labels)
    return Dataset(feats, labels, ds.labeled, None)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_label_mask(ds: Dataset, keep_fraction: float, n_strata: int = 10, seed: int = 0) -> Dataset:
    """Drop labels uniformly within label-quantile strata, keeping values intact.

    Rows are ranked by label and split into ``n_strata`` equal-probability
    strata; within each stratum of size ``n_s`` exactly ``round(keep_fraction
    * n_s)`` rows stay labeled, chosen uniformly by ``seed``.  Only the mask
    changes; features and label values pass through untouched.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    if n_strata < 1:
        raise ValueError("n_strata must be at least 1")
    if not ds.labeled.all():
        raise ValueError("stratified_label_mask expects a fully labeled dataset")
    rng = np.random.default_rng(seed)
    order = np.argsort(ds.labels, kind="stable")
    keep = np.zeros(ds.n, dtype=bool)
    for stratum in np.array_split(order, n_strata):
        k = _round_half_up(keep_fraction * stratum.size)
        if k > 0:
            chosen = rng.choice(stratum.size, size=k, replace=False)
            keep[stratum[chosen]] = True
    return replace(ds, labeled=keep)


def inject_marginal_bias(
    ds: Dataset,
    keep_fraction_above: float,
    threshold_quantile: float | None = None,
    seed: int = 0,
) -> Dataset:
    """Subsample rows whose label exceeds a threshold, biasing the marginal.

    The threshold is the given label quantile, or the label mean when
    ``threshold_quantile`` is None.  Rows at or below the threshold are kept in
    full; rows above it are kept with probability mass ``keep_fraction_above``
    (an exact count, chosen uniformly by seed).  Output rows are a subset of
    the input rows in their original order.
    """
    if not 0.0 <= keep_fraction_above <= 1.0:
        raise ValueError("keep_fraction_above must lie in [0, 1]")
    if not ds.labeled.all():
        raise ValueError("inject_marginal_bias expects a fully labeled dataset")
    if threshold_quantile is None:
        threshold = float(ds.labels.mean())
    else:
        if not 0.0 <= threshold_quantile <= 1.0:
            raise ValueError("threshold_quantile must lie in [0, 1]")
        threshold = float(np.quantile(ds.labels, threshold_quantile))
    rng = np.random.default_rng(seed)
    above = np.flatnonzero(ds.labels > threshold)
    k = _round_half_up(keep_fraction_above * above.size)
    keep = ds.labels <= threshold
    if k > 0:
        kept_above = rng.choice(above, size=k, replace=False)
        keep[kept_above] = True
    return ds.subset(np.flatnonzero(keep))


@dataclass(frozen=True)
class GeneratorSpec:
    """Synthetic covariate-shift scenario: one response surface, two domains."""

    scenario: str
    d: int
    n_source: int
    n_target_train: int
    n_target_val: int
    n_target_test: int
    shift_mean: np.ndarray
    shift_scale: np.ndarray
    noise_std: float
    seed: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("feature dimension must be at least 1")
        for name in ("n_source", "n_target_train", "n_target_val", "n_target_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        mean = np.broadcast_to(np.asarray(self.shift_mean, dtype=np.float64), (self.d,))
        scale = np.broadcast_to(np.asarray(self.shift_scale, dtype=np.float64), (self.d,))
        object.__setattr__(self, "shift_mean", _frozen_array(mean))
        object.__setattr__(self, "shift_scale", _frozen_array(scale))
        if np.any(self.shift_scale <= 0):
            raise ValueError("shift_scale entries must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "d": self.d,
            "n_source": self.n_source,
            "n_target_train": self.n_target_train,
            "n_target_val": self.n_target_val,
            "n_target_test": self.n_target_test,
            "shift_mean": self.shift_mean.tolist(),
            "shift_scale": self.shift_scale.tolist(),
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            scenario=d["scenario"],
            d=int(d["d"]),
            n_source=int(d["n_source"]),
            n_target_train=int(d["n_target_train"]),
            n_target_val=int(d["n_target_val"]),
            n_target_test=int(d["n_target_test"]),
            shift_mean=d["shift_mean"],
            shift_scale=d["shift_scale"],
            noise_std=float(d["noise_std"]),
            seed=int(d["seed"]),
        )


def ground_truth(X: np.ndarray) -> np.ndarray:
    """Shared response surface: sum of per-feature sines plus one pairwise interaction."""
    y = np.sin(X).sum(axis=1)
    if X.shape[1] >= 2:
        y = y + 0.5 * X[:, 0] * X[:, 1]
    return y


def generate_synthetic(spec: GeneratorSpec):
    """Draw (source, target_train, target_val, target_test), all fully labeled.

    Source covariates are standard normal; target covariates are shifted by
    ``shift_mean`` and scaled by ``shift_scale`` componentwise.  All splits
    share the response surface, get independent noise, and are disjoint draws
    from one seeded stream.
    """
    rng = np.random.default_rng(spec.seed)

    def draw(n, shifted):
        X = rng.standard_normal((n, spec.d))
        if shifted:
            X = spec.shift_mean + spec.shift_scale * X
        y = ground_truth(X) + rng.normal(0.0, spec.noise_std, n)
        return Dataset(X, y, np.ones(n, dtype=bool))

    source = draw(spec.n_source, shifted=False)
    target_train = draw(spec.n_target_train, shifted=True)
    target_val = draw(spec.n_target_val, shifted=True)
    target_test = draw(spec.n_target_test, shifted=True)
    return source, target_train, target_val, target_test
