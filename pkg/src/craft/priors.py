"""Label-marginal priors and their shared log-density interface.

Three prior forms are supported: a uniform density over a range, a histogram
density, and a mixture of Gaussians and exponentials fitted by EM.  The
mixture acts on data shifted by a constant offset so exponential components
see strictly positive values; the offset is part of the fitted parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MixtureSpec",
    "MixtureParams",
    "UniformPrior",
    "HistogramPrior",
    "MixturePrior",
    "em_fit",
    "mixture_log_density",
    "prior_log_density",
    "fit_histogram_prior",
    "affine_transform_prior",
    "prior_to_dict",
    "prior_from_dict",
]


@dataclass(frozen=True)
class MixtureSpec:
    """Shape and stopping rules for the EM fit.

    ``var_floor`` is a hard lower bound on Gaussian variances; None means
    1e-4 times the squared data range, decided at fit time.
    """

    n_gaussians: int = 2
    n_exponentials: int = 1
    max_iters: int = 500
    tol: float = 1e-6
    var_floor: float | None = None

    def __post_init__(self):
        if self.n_gaussians < 0 or self.n_exponentials < 0:
            raise ValueError("component counts must be nonnegative")
        if self.n_gaussians + self.n_exponentials < 1:
            raise ValueError("need at least one mixture component")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.var_floor is not None and self.var_floor <= 0:
            raise ValueError("var_floor must be positive")


def _frozen(values):
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MixtureParams:
    """Fitted mixture: component weights, Gaussian (mean, variance) pairs,
    exponential rates, and the offset applied before evaluation.

    ``loglik_path`` records the per-iteration log-likelihood of the fit; it is
    diagnostic only and excluded from serialization and equality.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    rates: np.ndarray
    offset: float
    loglik_path: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "means", _frozen(self.means))
        object.__setattr__(self, "variances", _frozen(self.variances))
        object.__setattr__(self, "rates", _frozen(self.rates))
        object.__setattr__(self, "offset", float(self.offset))
        k = self.means.size + self.rates.size
        if self.weights.shape != (k,):
            raise ValueError("weights must have one entry per component")
        if np.any(self.weights < 0) or abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must pair up")
        if np.any(self.variances <= 0):
            raise ValueError("Gaussian variances must be positive")
        if np.any(self.rates <= 0):
            raise ValueError("exponential rates must be positive")

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "gaussians": [[m, v] for m, v in zip(self.means.tolist(), self.variances.tolist())],
            "exponentials": self.rates.tolist(),
            "offset": self.offset,
        }

    @classmethod
    def from_dict(cls, d):
        gaussians = d.get("gaussians", [])
        return cls(
            weights=d["weights"],
            means=[g[0] for g in gaussians],
            variances=[g[1] for g in gaussians],
            rates=d.get("exponentials", []),
            offset=d.get("offset", 0.0),
        )


def _component_log_pdfs(means, variances, rates, z):
    """Per-component log densities at the shifted points ``z``, stacked (k, m)."""
    parts = []
    for mu, var in zip(means, variances):
        parts.append(-0.5 * np.log(2.0 * np.pi * var) - (z - mu) ** 2 / (2.0 * var))
    for lam in rates:
        with np.errstate(invalid="ignore"):
            parts.append(np.where(z >= 0.0, math.log(lam) - lam * z, -np.inf))
    return np.array(parts)


def _logsumexp_rows(a):
    """Log-sum-exp down axis 0, tolerating all minus-infinity columns."""
    m = np.max(a, axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(a - safe).sum(axis=0))
    return np.where(np.isfinite(m), out, -np.inf)


def em_fit(labels, spec: MixtureSpec, seed: int = 0) -> MixtureParams:
    """Fit the Gaussian/exponential mixture to 1-d samples by EM.

    The E-step assigns responsibilities proportional to weighted component
    densities; the M-step re-estimates weights as responsibility means,
    Gaussian moments as responsibility-weighted means and (floored) variances,
    and exponential rates as responsibility mass over responsibility-weighted
    sums, all on offset-shifted data.  Iteration stops once the log-likelihood
    improves by less than ``tol`` or ``max_iters`` is hit; the likelihood path
    is monotone nondecreasing up to rounding.
    """
    x = np.asarray(labels, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("labels must be a nonempty vector")
    if not np.isfinite(x).all():
        raise ValueError("labels contain non-finite values")
    k1, k2 = spec.n_gaussians, spec.n_exponentials
    if np.unique(x).size < k1 + k2:
        raise ValueError(f"need at least {k1 + k2} distinct values to fit {k1 + k2} components")
    data_range = float(x.max() - x.min())
    if data_range == 0.0:
        raise ValueError("degenerate data: all labels identical")
    var_floor = spec.var_floor if spec.var_floor is not None else 1e-4 * data_range**2
    offset = (max(0.0, -float(x.min())) + 1e-6 * data_range) if k2 > 0 else 0.0
    z = x + offset
    n = z.size

    rng = np.random.default_rng(seed)
    if k1 > 0:
        means = np.quantile(z, (np.arange(k1) + 1.0) / (k1 + 1.0))
        variances = np.full(k1, max(float(z.var()), var_floor))
    else:
        means = np.empty(0)
        variances = np.empty(0)
    if k2 > 0:
        rates = (1.0 / float(z.mean())) * (1.0 + 0.1 * (2.0 * rng.random(k2) - 1.0))
    else:
        rates = np.empty(0)
    weights = np.full(k1 + k2, 1.0 / (k1 + k2))

    path = []
    prev = None
    for iteration in range(spec.max_iters):
        comp = _component_log_pdfs(means, variances, rates, z)
        with np.errstate(divide="ignore"):
            weighted = np.log(weights)[:, None] + comp
        per_point = _logsumexp_rows(weighted)
        ll = float(per_point.sum())
        if not np.isfinite(ll):
            raise ValueError(f"EM log-likelihood became non-finite at iteration {iteration}")
        path.append(ll)
        if prev is not None and ll - prev < spec.tol:
            break
        prev = ll
        resp = np.exp(weighted - per_point[None, :])
        mass = resp.sum(axis=1)
        weights = mass / n
        for j in range(k1):
            if mass[j] <= 1e-12:
                continue  # dead component: keep its previous shape
            mu = float(resp[j] @ z / mass[j])
            var = float(resp[j] @ (z - mu) ** 2 / mass[j])
            means[j] = mu
            variances[j] = max(var, var_floor)
        for j in range(k2):
            r = k1 + j
            if mass[r] <= 1e-12:
                continue
            rates[j] = float(mass[r] / (resp[r] @ z))
    return MixtureParams(weights, means, variances, rates, offset, loglik_path=tuple(path))


def mixture_log_density(params: MixtureParams, y):
    """Log density of the mixture at ``y`` (scalar or vector), via log-sum-exp.

    Exponential components carry no mass below the offset-shifted origin, so a
    pure-exponential mixture returns -inf there.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    scalar = y_arr.ndim == 0
    z = np.atleast_1d(y_arr) + params.offset
    comp = _component_log_pdfs(params.means, params.variances, params.rates, z)
    with np.errstate(divide="ignore"):
        weighted = np.log(params.weights)[:, None] + comp
    out = _logsumexp_rows(weighted)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("uniform prior needs lo < hi")


@dataclass(frozen=True)
class HistogramPrior:
    """Piecewise-constant density on contiguous bins.

    Bin weights are normalized to sum to 1 at construction, so any positive
    rescaling of the input weights yields the same prior.
    """

    edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        edges = _frozen(self.edges)
        probs = np.array(self.probs, dtype=np.float64)
        if edges.ndim != 1 or edges.size != probs.size + 1:
            raise ValueError("need len(edges) == len(probs) + 1")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing")
        if np.any(probs < 0):
            raise ValueError("bin weights must be nonnegative")
        total = float(probs.sum())
        if total <= 0:
            raise ValueError("bin weights must not all be zero")
        probs = probs / total
        probs.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class MixturePrior:
    params: MixtureParams


LabelPrior = UniformPrior | HistogramPrior | MixturePrior


def prior_log_density(prior, y):
    """Log density of a label prior at ``y`` (scalar or vector); -inf off support."""
    y_arr = np.asarray(y, dtype=np.float64)
    scalar = y_arr.ndim == 0
    yv = np.atleast_1d(y_arr)
    if isinstance(prior, UniformPrior):
        inside = (yv >= prior.lo) & (yv <= prior.hi)
        out = np.where(inside, -math.log(prior.hi - prior.lo), -np.inf)
    elif isinstance(prior, HistogramPrior):
        nbins = prior.probs.size
        idx = np.searchsorted(prior.edges, yv, side="right") - 1
        idx = np.where(yv == prior.edges[-1], nbins - 1, idx)
        inside = (idx >= 0) & (idx < nbins)
        safe = np.clip(idx, 0, nbins - 1)
        widths = np.diff(prior.edges)
        with np.errstate(divide="ignore"):
            dens = np.log(prior.probs[safe] / widths[safe])
        out = np.where(inside, dens, -np.inf)
    elif isinstance(prior, MixturePrior):
        out = mixture_log_density(prior.params, yv)
    else:
        raise TypeError(f"unknown prior type {type(prior).__name__}")
    return float(out[0]) if scalar else out


def fit_histogram_prior(labels, n_bins: int) -> HistogramPrior:
    """Equal-width histogram over [min, max] with empirical bin frequencies.

    Identical labels collapse to a single unit-width bin centered on the value.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    x = np.asarray(labels, dtype=np.float64)
    if x.size == 0:
        raise ValueError("labels must be nonempty")
    if not np.isfinite(x).all():
        raise ValueError("labels contain non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return HistogramPrior(np.array([lo - 0.5, lo + 0.5]), np.array([1.0]))
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(x, bins=edges)
    return HistogramPrior(edges, counts / x.size)


def affine_transform_prior(prior, scale: float, shift: float):
    """Re-express a prior for the transformed variable ``y' = scale * y + shift``.

    All three forms are closed under positive affine maps; densities pick up
    the usual 1/scale Jacobian.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    if isinstance(prior, UniformPrior):
        return UniformPrior(scale * prior.lo + shift, scale * prior.hi + shift)
    if isinstance(prior, HistogramPrior):
        return HistogramPrior(scale * prior.edges + shift, prior.probs)
    if isinstance(prior, MixturePrior):
        p = prior.params
        # the shifted variable x = y + offset maps to x' = scale * x when the
        # new offset is scale * offset - shift
        return MixturePrior(
            MixtureParams(
                weights=p.weights,
                means=scale * p.means,
                variances=scale**2 * p.variances,
                rates=p.rates / scale,
                offset=scale * p.offset - shift,
            )
        )
    raise TypeError(f"unknown prior type {type(prior).__name__}")


def prior_to_dict(prior) -> dict:
    if isinstance(prior, UniformPrior):
        return {"kind": "uniform", "lo": prior.lo, "hi": prior.hi}
    if isinstance(prior, HistogramPrior):
        return {"kind": "histogram", "edges": prior.edges.tolist(), "probs": prior.probs.tolist()}
    if isinstance(prior, MixturePrior):
        return {"kind": "mixture", **prior.params.to_dict()}
    raise TypeError(f"unknown prior type {type(prior).__name__}")


def prior_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "uniform":
        return UniformPrior(float(d["lo"]), float(d["hi"]))
    if kind == "histogram":
        return HistogramPrior(d["edges"], d["probs"])
    if kind == "mixture":
        return MixturePrior(MixtureParams.from_dict(d))
    raise ValueError(f"unknown prior kind {kind!r}")
