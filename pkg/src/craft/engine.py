"""Source-free adaptation engine.

The adaptive method trains a pretrained regressor on a partially labeled
target set with a two-step scheme per batch: first, candidate labels (the
midpoints of a bin grid) are scored jointly for the whole batch and the best
one per sample is frozen as its pseudo-label; second, one optimizer step is
taken on a combined loss.  The joint score of candidate y for sample i is the
Gaussian match between y and the prediction f_i, normalized by the total
Gaussian mass the batch places on y, times the label prior: a candidate that
many samples' predictions crowd around is discounted, which both fights the
source model's prediction bias and lets the prior steer the label marginal.

The combined loss is the supervised sum of squared residuals plus, weighted
by alpha, a per-sample self-identification term: with scaled squared
distances d_il between pseudo-label i and prediction l, sample i contributes
-log(exp(-d_ii) / sum_l exp(-d_il)), which is zero exactly when sample i is
the only plausible match for its own pseudo-label.  Setting alpha to zero
reduces the method to plain supervised fine-tuning on the labeled rows.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .network import AdamState, RegressorParams, adam_step, backward, forward_batch
from .priors import prior_log_density

__all__ = [
    "BinGrid",
    "CraftConfig",
    "LossBreakdown",
    "RunReport",
    "ConstantPredictor",
    "make_bin_grid",
    "joint_log_scores",
    "select_pseudo_labels",
    "craft_loss_and_grad",
    "batch_joint_log_density",
    "fit_craft",
    "fit_tl",
    "naive_baseline",
]


@dataclass(frozen=True)
class BinGrid:
    """Equal-width discretization of a label range; midpoints are the candidates."""

    lo: float
    hi: float
    count: int

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        object.__setattr__(self, "count", int(self.count))
        if not self.lo < self.hi:
            raise ValueError("grid needs lo < hi")
        if self.count < 2:
            raise ValueError("grid needs at least 2 bins")
        mids = self.lo + (np.arange(self.count) + 0.5) * self.width
        mids.setflags(write=False)
        object.__setattr__(self, "_midpoints", mids)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.count

    @property
    def midpoints(self) -> np.ndarray:
        return self._midpoints


def make_bin_grid(count: int, labels=None, lo: float | None = None, hi: float | None = None) -> BinGrid:
    """Build a grid from an explicit range, or from labels with a one-bin margin.

    Label-built grids solve the margin self-consistently: with width
    w = (max - min) / (count - 2) the grid spans exactly [min - w, max + w],
    so every label falls strictly inside and the margin is one bin wide.
    """
    if labels is not None:
        if lo is not None or hi is not None:
            raise ValueError("pass either labels or an explicit range, not both")
        x = np.asarray(labels, dtype=np.float64)
        if x.size == 0 or not np.isfinite(x).all():
            raise ValueError("labels must be nonempty and finite")
        if count < 3:
            raise ValueError("label-built grids need at least 3 bins")
        span = float(x.max() - x.min())
        if span == 0.0:
            raise ValueError("label range is zero; pass an explicit range instead")
        w = span / (count - 2)
        return BinGrid(float(x.min()) - w, float(x.max()) + w, count)
    if lo is None or hi is None:
        raise ValueError("need labels or both lo and hi")
    return BinGrid(lo, hi, count)


@dataclass
class CraftConfig:
    """Adaptation hyperparameters.

    ``alpha`` weighs the unsupervised term; ``c`` is the Gaussian variance of
    the match score (at the default 0.5 the quadratics enter unscaled).
    ``pseudo_source`` controls whether labeled batch members join the
    unsupervised term with selected pseudo-labels (default) or their true
    labels.
    """

    alpha: float = 0.1
    c: float = 0.5
    grid: BinGrid | None = None
    prior: object | None = None
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    learning_rate: float = 1e-4
    pseudo_source: str = "pseudo_for_all"
    model_selection: str = "best_val"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.pseudo_source not in ("pseudo_for_all", "true_labels_for_labeled"):
            raise ValueError(f"unknown pseudo_source {self.pseudo_source!r}")
        if self.model_selection not in ("best_val", "final"):
            raise ValueError(f"unknown model_selection {self.model_selection!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components; total == supervised + alpha * (unsup_quadratic + unsup_contrastive)."""

    supervised: float
    unsup_quadratic: float
    unsup_contrastive: float
    total: float


def joint_log_scores(predictions, grid: BinGrid, prior, c: float = 0.5) -> np.ndarray:
    """Log joint score of every (sample, candidate midpoint) pair, shape (n, B).

    Entry (i, b) is the negated scaled squared distance between midpoint b and
    prediction i, minus the log-sum-exp over the batch of the same distances
    to midpoint b, plus the midpoint's prior log density.  The Gaussian
    normalizing constant cancels between the match term and the batch total.
    """
    f = np.asarray(predictions, dtype=np.float64)
    if f.ndim != 1 or f.size < 1:
        raise ValueError("predictions must be a nonempty vector")
    mids = grid.midpoints
    # candidate-major layout keeps the batch reduction on the contiguous axis
    neg_d = -((mids[:, None] - f[None, :]) ** 2) / (2.0 * c)
    batch_max = neg_d.max(axis=1)
    batch_lse = batch_max + np.log(np.exp(neg_d - batch_max[:, None]).sum(axis=1))
    logp = prior_log_density(prior, mids)
    # grouping matters: normalizing the match term first keeps a singleton
    # batch exactly tied across bins, so the distance tie-break can apply
    return (neg_d.T - batch_lse[None, :]) + logp[None, :]


def _select_bin_indices(predictions, grid: BinGrid, prior, c: float) -> np.ndarray:
    scores = joint_log_scores(predictions, grid, prior, c)
    f = np.asarray(predictions, dtype=np.float64)
    best = scores.max(axis=1, keepdims=True)
    dist = np.abs(grid.midpoints[None, :] - f[:, None])
    # ties on the score fall back to the nearest midpoint; argmin then breaks
    # remaining distance ties toward the lowest bin index
    dist = np.where(scores == best, dist, np.inf)
    return dist.argmin(axis=1)


def select_pseudo_labels(predictions, grid: BinGrid, prior, c: float = 0.5) -> np.ndarray:
    """Midpoint of the highest-scoring bin per sample (see :func:`joint_log_scores`)."""
    return grid.midpoints[_select_bin_indices(predictions, grid, prior, c)]


def _unsup_terms(f: np.ndarray, targets: np.ndarray, c: float):
    """Per-sample pieces of the self-identification loss, plus its prediction gradient.

    Sample i contributes d_ii + log sum_l exp(-d_il), reported as a quadratic
    excess over the row minimum (nonnegative) plus a crowding term in
    [0, log n]; both are exactly zero for a singleton batch.
    """
    dmat = (targets[:, None] - f[None, :]) ** 2 / (2.0 * c)
    row_min = dmat.min(axis=1)
    w = np.exp(-(dmat - row_min[:, None]))
    sums = w.sum(axis=1)
    quad = np.diagonal(dmat) - row_min
    crowding = np.log(sums)
    softmax = w / sums[:, None]
    resid = f[None, :] - targets[:, None]
    d_loss_d_f = (np.diagonal(resid).copy() - (softmax * resid).sum(axis=0)) / c
    return quad, crowding, d_loss_d_f


def craft_loss_and_grad(params: RegressorParams, x_labeled, y_labeled, x_unsup, unsup_targets,
                        config: CraftConfig):
    """Combined loss and its exact parameter gradient at fixed unsupervised targets.

    ``x_unsup``/``unsup_targets`` hold every row participating in the
    unsupervised term together with its frozen target (pseudo-label or true
    label); rows may appear in both batches.  With alpha zero, or an empty
    unsupervised batch, the computation reduces to the pure supervised path.
    """
    x_labeled = np.asarray(x_labeled, dtype=np.float64)
    x_unsup = np.asarray(x_unsup, dtype=np.float64)
    n_sup = x_labeled.shape[0]
    n_unsup = x_unsup.shape[0]
    if n_sup == 0 and n_unsup == 0:
        raise ValueError("both batches are empty")
    if n_sup:
        y_labeled = np.asarray(y_labeled, dtype=np.float64)
        residual = forward_batch(params, x_labeled) - y_labeled
        supervised = float(residual @ residual)
        upstream_sup = 2.0 * residual
    else:
        supervised = 0.0
        upstream_sup = np.empty(0)
    use_unsup = config.alpha > 0.0 and n_unsup > 0
    if use_unsup:
        targets = np.asarray(unsup_targets, dtype=np.float64)
        if targets.shape != (n_unsup,):
            raise ValueError("unsup_targets must match the unsupervised batch")
        f_unsup = forward_batch(params, x_unsup)
        quad, crowding, d_f = _unsup_terms(f_unsup, targets, config.c)
        unsup_quadratic = float(quad.sum())
        unsup_contrastive = float(crowding.sum())
        if n_sup:
            x_all = np.vstack([x_labeled, x_unsup])
            upstream = np.concatenate([upstream_sup, config.alpha * d_f])
        else:
            x_all, upstream = x_unsup, config.alpha * d_f
    else:
        unsup_quadratic = 0.0
        unsup_contrastive = 0.0
        x_all, upstream = x_labeled, upstream_sup
    total = supervised + config.alpha * (unsup_quadratic + unsup_contrastive)
    if not math.isfinite(total):
        raise ValueError("non-finite training loss")
    grads = backward(params, x_all, upstream)
    return LossBreakdown(supervised, unsup_quadratic, unsup_contrastive, total), grads


def batch_joint_log_density(params: RegressorParams, x, targets, prior, c: float):
    """Sum over rows of the full normalized joint log density at fixed targets.

    Unlike the training loss, this keeps every parameter-free term (the prior
    mass and the Gaussian normalizer), so maximizing it is equivalent to
    minimizing the unsupervised loss; the exact gradient is returned alongside.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    f = forward_batch(params, x)
    log_pdf = -0.5 * np.log(2.0 * np.pi * c) - (targets[:, None] - f[None, :]) ** 2 / (2.0 * c)
    row_max = log_pdf.max(axis=1)
    row_lse = row_max + np.log(np.exp(log_pdf - row_max[:, None]).sum(axis=1))
    total = float(np.sum(np.diagonal(log_pdf) - row_lse + prior_log_density(prior, targets)))
    softmax = np.exp(log_pdf - row_lse[:, None])
    resid = f[None, :] - targets[:, None]
    d_f = (-np.diagonal(resid) + (softmax * resid).sum(axis=0)) / c
    return total, backward(params, x, d_f)


@dataclass
class RunReport:
    """Per-run record: configuration echo, per-epoch losses and timings,
    selected pseudo-label counts per bin, and (once evaluated) test metrics."""

    method: str
    seed: int
    alpha: float
    c: float
    bins: int | None
    label_fraction: float | None = None
    rmse: float | None = None
    pbcor: float | None = None
    epochs: list = field(default_factory=list)
    pseudo_label_hist: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "alpha": self.alpha,
            "c": self.c,
            "bins": self.bins,
            "label_fraction": self.label_fraction,
            "rmse": self.rmse,
            "pbcor": self.pbcor,
            "epochs": self.epochs,
            "pseudo_label_hist": self.pseudo_label_hist,
        }


def _fit(source_params: RegressorParams, target: Dataset, config: CraftConfig, val: Dataset | None,
         use_unsup: bool, method: str, epoch_callback=None):
    X, y = target.features, target.labels
    labeled_idx = np.flatnonzero(target.labeled)
    unlabeled_idx = np.flatnonzero(~target.labeled)
    if not use_unsup and labeled_idx.size == 0:
        raise ValueError("supervised fine-tuning needs at least one labeled row")
    if use_unsup and config.alpha > 0.0 and (config.grid is None or config.prior is None):
        raise ValueError("adaptation needs a bin grid and a label prior")
    params = source_params.copy()
    state = AdamState.init(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n_batches = max(1, math.ceil(target.n / config.batch_size))
    bins = config.grid.count if config.grid is not None else None
    hist = np.zeros(bins or 0, dtype=np.int64)
    epoch_rows = []
    track_val = val is not None and config.model_selection == "best_val"
    best_val_rmse = math.inf
    best_params = None
    empty_x = np.empty((0, target.d))
    empty_y = np.empty(0)

    for epoch in range(config.epochs):
        epoch_start = time.perf_counter()
        select_s = 0.0
        step_s = 0.0
        sums = [0.0, 0.0, 0.0]
        labeled_chunks = np.array_split(rng.permutation(labeled_idx), n_batches)
        unlabeled_chunks = np.array_split(rng.permutation(unlabeled_idx), n_batches)
        for chunk_l, chunk_u in zip(labeled_chunks, unlabeled_chunks):
            do_unsup = use_unsup and config.alpha > 0.0 and (chunk_l.size + chunk_u.size) > 0
            if chunk_l.size:
                x_l, y_l = X[chunk_l], y[chunk_l]
            else:
                x_l, y_l = empty_x, empty_y
            if do_unsup:
                t0 = time.perf_counter()
                members = np.concatenate([chunk_l, chunk_u])
                x_u = X[members]
                preds = forward_batch(params, x_u)
                chosen = _select_bin_indices(preds, config.grid, config.prior, config.c)
                targets = config.grid.midpoints[chosen]
                if config.pseudo_source == "true_labels_for_labeled" and chunk_l.size:
                    targets = targets.copy()
                    targets[: chunk_l.size] = y_l
                    np.add.at(hist, chosen[chunk_l.size:], 1)
                else:
                    np.add.at(hist, chosen, 1)
                select_s += time.perf_counter() - t0
            elif chunk_l.size == 0:
                continue  # nothing contributes a gradient; keep paths aligned across methods
            else:
                x_u, targets = empty_x, empty_y
            t0 = time.perf_counter()
            breakdown, grads = craft_loss_and_grad(params, x_l, y_l, x_u, targets, config)
            params, state = adam_step(params, grads, state)
            step_s += time.perf_counter() - t0
            sums[0] += breakdown.supervised
            sums[1] += breakdown.unsup_quadratic
            sums[2] += breakdown.unsup_contrastive
        epoch_rows.append({
            "supervised": sums[0],
            "unsup_quadratic": sums[1],
            "unsup_contrastive": sums[2],
            "wall_s": time.perf_counter() - epoch_start,
            "select_s": select_s,
            "step_s": step_s,
        })
        if track_val:
            val_rmse = float(np.sqrt(np.mean((forward_batch(params, val.features) - val.labels) ** 2)))
            if val_rmse < best_val_rmse:
                best_val_rmse = val_rmse
                best_params = params.copy()
        if epoch_callback is not None:
            epoch_callback(epoch, params)
    if track_val and best_params is not None:
        params = best_params
    report = RunReport(method=method, seed=config.seed, alpha=config.alpha, c=config.c,
                       bins=bins, epochs=epoch_rows, pseudo_label_hist=hist.tolist())
    return params, report


def fit_craft(source_params: RegressorParams, target: Dataset, config: CraftConfig,
              val: Dataset | None = None, epoch_callback=None):
    """Adapt pretrained parameters on a partially labeled target set.

    Per batch: pseudo-labels are selected at the current parameters for all
    participating rows (labeled ones included unless configured otherwise),
    then one optimizer step runs on the combined loss.  Works with any labeled
    fraction in [0, 1]; with zero labeled rows only the unsupervised term
    drives the fit.  Deterministic given the config seed.
    """
    return _fit(source_params, target, config, val, use_unsup=True, method="craft",
                epoch_callback=epoch_callback)


def fit_tl(source_params: RegressorParams, target: Dataset, config: CraftConfig,
           val: Dataset | None = None, epoch_callback=None):
    """Supervised fine-tuning on the labeled rows only, same batching and optimizer."""
    return _fit(source_params, target, config, val, use_unsup=False, method="tl",
                epoch_callback=epoch_callback)


@dataclass(frozen=True)
class ConstantPredictor:
    value: float

    def predict(self, X) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.value)


def naive_baseline(train_labels) -> ConstantPredictor:
    """Constant predictor emitting the mean training label."""
    labels = np.asarray(train_labels, dtype=np.float64)
    if labels.size < 1:
        raise ValueError("need at least one labeled row")
    return ConstantPredictor(float(labels.mean()))
