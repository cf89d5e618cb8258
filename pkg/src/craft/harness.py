"""Experiment harness: configuration, source training, adaptation runs, sweeps.

Adaptation is source-free by contract: a run reads the source checkpoint and
target files, never source data.  Every file a command opens for reading is
recorded and echoed in the run report so the contract is auditable.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    GeneratorSpec,
    apply_scaler,
    fit_scaler,
    generate_synthetic,
    inject_marginal_bias,
    load_csv,
    stratified_label_mask,
    write_csv,
)
from .engine import CraftConfig, RunReport, fit_craft, fit_tl, make_bin_grid, naive_baseline
from .metrics import evaluate, rmse
from .network import Checkpoint, MlpSpec, init_params, load_checkpoint, save_checkpoint
from .priors import (
    MixturePrior,
    MixtureSpec,
    UniformPrior,
    affine_transform_prior,
    em_fit,
    fit_histogram_prior,
    prior_from_dict,
    prior_log_density,
    prior_to_dict,
)

__all__ = [
    "ExperimentConfig",
    "RUN_REPORT_SCHEMA",
    "default_scenario",
    "train_source_in_memory",
    "adapt_in_memory",
    "run_synth",
    "run_train_source",
    "run_adapt",
    "run_sweep",
    "run_fit_prior",
    "run_evaluate",
]

# environment variables that may override path-valued config fields
ENV_PATH_OVERRIDES = {
    "CRAFT_SOURCE_CHECKPOINT": "source_checkpoint",
    "CRAFT_SOURCE_TRAIN": "source_train",
    "CRAFT_TARGET_TRAIN": "target_train",
    "CRAFT_TARGET_VAL": "target_val",
    "CRAFT_TARGET_TEST": "target_test",
    "CRAFT_PRIOR_FILE": "prior_file",
    "CRAFT_OUT_DIR": "out_dir",
}

RUN_REPORT_SCHEMA = {
    "type": "object",
    "required": ["method", "seed", "alpha", "c", "bins", "label_fraction",
                 "rmse", "pbcor", "epochs", "pseudo_label_hist"],
    "properties": {
        "method": {"enum": ["craft", "tl", "naive"]},
        "seed": {"type": "integer"},
        "alpha": {"type": "number", "minimum": 0},
        "c": {"type": "number", "exclusiveMinimum": 0},
        "bins": {"type": ["integer", "null"], "minimum": 2},
        "label_fraction": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
        "rmse": {"type": ["number", "null"], "minimum": 0},
        "pbcor": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        "epochs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["supervised", "unsup_quadratic", "unsup_contrastive", "wall_s"],
                "properties": {
                    "supervised": {"type": "number", "minimum": 0},
                    "unsup_quadratic": {"type": "number", "minimum": 0},
                    "unsup_contrastive": {"type": "number", "minimum": 0},
                    "wall_s": {"type": "number", "minimum": 0},
                    "select_s": {"type": "number", "minimum": 0},
                    "step_s": {"type": "number", "minimum": 0},
                },
            },
        },
        "pseudo_label_hist": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "files_opened": {"type": "array", "items": {"type": "string"}},
    },
}


@dataclass
class ExperimentConfig:
    """One JSON-loadable bag of knobs for every command; unused fields are ignored."""

    # data: either a generator scenario or CSV paths
    scenario: GeneratorSpec | None = None
    source_train: str | None = None
    source_checkpoint: str | None = None
    target_train: str | None = None
    target_val: str | None = None
    target_test: str | None = None
    out_dir: str = "runs"
    # network
    hidden_layers: tuple = (32, 32)
    activation: str = "tanh"
    # training
    method: str = "craft"
    alpha: float = 0.1
    c: float = 0.5
    bins: int = 200
    batch_size: int = 64
    epochs: int = 40
    learning_rate: float = 1e-4
    pseudo_source: str = "pseudo_for_all"
    model_selection: str = "best_val"
    seed: int = 0
    val_fraction: float = 0.2
    # label availability protocol
    label_fraction: float = 1.0
    n_strata: int = 10
    bias_keep_above: float | None = None
    bias_threshold_quantile: float | None = None
    # prior
    prior_source: str = "fit_labeled"  # fit_labeled | true_marginal | file
    prior_file: str | None = None
    prior_form: str = "mixture"  # mixture | histogram | uniform
    prior_bins: int = 10
    prior_gaussians: int = 2
    prior_exponentials: int = 1
    # sweep axes
    seeds: list | None = None
    label_fractions: list | None = None
    alphas: list | None = None
    bin_counts: list | None = None
    methods: list | None = None

    def __post_init__(self):
        if self.method not in ("craft", "tl", "naive"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.prior_source not in ("fit_labeled", "true_marginal", "file"):
            raise ValueError(f"unknown prior_source {self.prior_source!r}")
        if self.prior_form not in ("mixture", "histogram", "uniform"):
            raise ValueError(f"unknown prior_form {self.prior_form!r}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        if isinstance(raw.get("scenario"), dict):
            raw["scenario"] = GeneratorSpec.from_dict(raw["scenario"])
        if "hidden_layers" in raw:
            raw["hidden_layers"] = tuple(raw["hidden_layers"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_env_overrides(self) -> "ExperimentConfig":
        updates = {}
        for env, name in ENV_PATH_OVERRIDES.items():
            value = os.environ.get(env)
            if value:
                updates[name] = value
        return dataclasses.replace(self, **updates) if updates else self


def default_scenario(seed: int = 7, **overrides) -> GeneratorSpec:
    """The stock covariate-shift benchmark scenario."""
    base = dict(
        scenario="default-shift",
        d=8,
        n_source=4000,
        n_target_train=2000,
        n_target_val=500,
        n_target_test=1000,
        shift_mean=0.5,
        shift_scale=1.3,
        noise_std=0.1,
        seed=seed,
    )
    base.update(overrides)
    return GeneratorSpec(**base)


def _note(access_log, path) -> None:
    if access_log is not None:
        access_log.append(str(path))


def _tracked_load_csv(path, access_log):
    _note(access_log, path)
    return load_csv(path)


def train_source_in_memory(source: Dataset, cfg: ExperimentConfig):
    """Train a fresh regressor on a fully labeled source set, keeping the
    best-validation checkpoint; returns (params, scaler, report)."""
    if not source.labeled.all():
        raise ValueError("source training expects a fully labeled dataset")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(source.n)
    n_val = max(1, int(round(cfg.val_fraction * source.n)))
    if n_val >= source.n:
        raise ValueError("val_fraction leaves no training rows")
    val_raw = source.subset(perm[:n_val])
    train_raw = source.subset(perm[n_val:])
    scaler = fit_scaler(train_raw)
    train_scaled = apply_scaler(train_raw, scaler)
    val_scaled = apply_scaler(val_raw, scaler)
    spec = MlpSpec((source.d, *cfg.hidden_layers, 1), cfg.activation)
    params0 = init_params(spec, cfg.seed)
    config = CraftConfig(alpha=0.0, c=cfg.c, batch_size=cfg.batch_size, epochs=cfg.epochs,
                         seed=cfg.seed, learning_rate=cfg.learning_rate,
                         model_selection="best_val")
    params, report = fit_tl(params0, train_scaled, config, val=val_scaled)
    metrics = evaluate(params, val_raw, scaler)
    report.rmse = metrics.rmse
    report.pbcor = None if math.isnan(metrics.pbcor) else metrics.pbcor
    return params, scaler, report


def _build_prior(cfg: ExperimentConfig, labels_scaled: np.ndarray, grid, seed: int,
                 access_log=None):
    if cfg.prior_source == "file":
        if not cfg.prior_file:
            raise ValueError("prior_source 'file' needs prior_file")
        _note(access_log, cfg.prior_file)
        with open(cfg.prior_file, encoding="utf-8") as fh:
            return prior_from_dict(json.load(fh))
    if cfg.prior_form == "uniform":
        return UniformPrior(grid.lo, grid.hi)
    if labels_scaled.size == 0:
        raise ValueError("no labels available to fit the prior")
    if cfg.prior_form == "histogram":
        return fit_histogram_prior(labels_scaled, cfg.prior_bins)
    spec = MixtureSpec(cfg.prior_gaussians, cfg.prior_exponentials)
    return MixturePrior(em_fit(labels_scaled, spec, seed))


def adapt_in_memory(checkpoint: Checkpoint, train_raw: Dataset, val_raw: Dataset | None,
                    test_raw: Dataset, cfg: ExperimentConfig, seed: int | None = None,
                    access_log=None) -> dict:
    """One adaptation run against in-memory data; returns the report dict.

    The raw target train set must be fully labeled when a label-dropping
    protocol (bias injection, stratified masking) is configured; the true
    pre-distortion labels also feed the 'true_marginal' prior option.
    """
    if checkpoint.scaler is None:
        raise ValueError("checkpoint carries no scaler; retrain the source model")
    if checkpoint.params.spec.input_dim != train_raw.d:
        raise ValueError(
            f"checkpoint expects {checkpoint.params.spec.input_dim} features, data has {train_raw.d}"
        )
    seed = cfg.seed if seed is None else seed
    scaler = checkpoint.scaler

    work = train_raw
    if cfg.bias_keep_above is not None:
        work = inject_marginal_bias(work, cfg.bias_keep_above, cfg.bias_threshold_quantile, seed)
    if cfg.label_fraction < 1.0:
        work = stratified_label_mask(work, cfg.label_fraction, cfg.n_strata, seed)
    train_scaled = apply_scaler(work, scaler)
    val_scaled = apply_scaler(val_raw, scaler) if val_raw is not None else None

    report: RunReport
    if cfg.method == "naive":
        labeled_raw = work.labels[work.labeled]
        predictor = naive_baseline(labeled_raw)
        report = RunReport(method="naive", seed=seed, alpha=0.0, c=cfg.c, bins=None)
        report.rmse = rmse(predictor.predict(test_raw.features), test_raw.labels)
        report.pbcor = None
    else:
        labeled_scaled = train_scaled.labels[train_scaled.labeled]
        if labeled_scaled.size:
            grid = make_bin_grid(cfg.bins, labels=labeled_scaled)
        else:
            grid = make_bin_grid(cfg.bins, lo=-1.0, hi=1.0)  # the scaler's own label range
        prior = None
        if cfg.method == "craft" and cfg.alpha > 0.0:
            if cfg.prior_source == "true_marginal":
                prior_labels = apply_scaler(train_raw, scaler).labels
            else:
                prior_labels = labeled_scaled
            prior = _build_prior(cfg, prior_labels, grid, seed, access_log)
            if cfg.prior_source == "file":
                # file priors live in original label units; move them into model space
                a = 2.0 / (scaler.label_hi - scaler.label_lo)
                b = -2.0 * scaler.label_lo / (scaler.label_hi - scaler.label_lo) - 1.0
                prior = affine_transform_prior(prior, a, b)
        config = CraftConfig(alpha=cfg.alpha if cfg.method == "craft" else 0.0, c=cfg.c,
                             grid=grid, prior=prior, batch_size=cfg.batch_size,
                             epochs=cfg.epochs, seed=seed, learning_rate=cfg.learning_rate,
                             pseudo_source=cfg.pseudo_source, model_selection=cfg.model_selection)
        fit = fit_craft if cfg.method == "craft" else fit_tl
        params, report = fit(checkpoint.params, train_scaled, config, val=val_scaled)
        metrics = evaluate(params, test_raw, scaler)
        report.rmse = metrics.rmse
        report.pbcor = None if math.isnan(metrics.pbcor) else metrics.pbcor
    report.label_fraction = cfg.label_fraction
    out = report.to_dict()
    if access_log is not None:
        out["files_opened"] = list(access_log)
    return out


# ---------------------------------------------------------------------------
# file-based commands


def run_synth(cfg: ExperimentConfig) -> dict:
    """Generate the configured scenario and write the four CSV splits plus a
    sidecar JSON with the generator settings."""
    spec = cfg.scenario or default_scenario(seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, train, val, test = generate_synthetic(spec)
    paths = {}
    for name, ds in [("source", source), ("target_train", train),
                     ("target_val", val), ("target_test", test)]:
        path = out / f"{name}.csv"
        write_csv(ds, path)
        paths[name] = str(path)
    sidecar = out / "scenario.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
    paths["scenario"] = str(sidecar)
    return paths


def run_train_source(cfg: ExperimentConfig) -> dict:
    access: list = []
    if cfg.source_train:
        source = _tracked_load_csv(cfg.source_train, access)
    elif cfg.scenario is not None:
        source = generate_synthetic(cfg.scenario)[0]
    else:
        raise ValueError("train-source needs source_train or a scenario")
    params, scaler, report = train_source_in_memory(source, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "source_checkpoint.json"
    save_checkpoint(ckpt_path, params, scaler)
    report_dict = report.to_dict()
    report_dict["files_opened"] = access
    report_path = out / "source_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_dict, fh, indent=2)
    return {"checkpoint": str(ckpt_path), "report": str(report_path), "val_rmse": report.rmse}


def _load_adapt_inputs(cfg: ExperimentConfig, access: list):
    if not cfg.source_checkpoint:
        raise ValueError("adapt needs a source_checkpoint path")
    if not cfg.target_train or not cfg.target_test:
        raise ValueError("adapt needs target_train and target_test paths")
    _note(access, cfg.source_checkpoint)
    checkpoint = load_checkpoint(cfg.source_checkpoint)
    train = _tracked_load_csv(cfg.target_train, access)
    val = _tracked_load_csv(cfg.target_val, access) if cfg.target_val else None
    test = _tracked_load_csv(cfg.target_test, access)
    return checkpoint, train, val, test


def run_adapt(cfg: ExperimentConfig) -> dict:
    """Source-free adaptation from files: reads only the checkpoint, the target
    CSVs, and (optionally) a prior file; writes one report JSON."""
    access: list = []
    checkpoint, train, val, test = _load_adapt_inputs(cfg, access)
    report = adapt_in_memory(checkpoint, train, val, test, cfg, access_log=access)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"report_{cfg.method}_seed{cfg.seed}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    report["report_path"] = str(path)
    return report


def _median(values):
    finite = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(finite)) if finite else None


def aggregate_sweep_rows(rows) -> list:
    """Median metrics per (method, label_fraction, alpha, bins), recomputable from rows."""
    groups: dict = {}
    for row in rows:
        if "error" in row:
            continue
        key = (row["method"], row["label_fraction"], row["alpha"], row["bins"])
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(p) for p in k)):
        members = groups[key]
        out.append({
            "method": key[0],
            "label_fraction": key[1],
            "alpha": key[2],
            "bins": key[3],
            "n_runs": len(members),
            "median_rmse": _median([m["rmse"] for m in members]),
            "median_pbcor": _median([m["pbcor"] for m in members]),
        })
    return out


def run_sweep(cfg: ExperimentConfig) -> dict:
    """Cartesian sweep over (methods x fractions x alphas x bins x seeds).

    Rows append to ``runs.jsonl`` as they finish (a failed cell becomes an
    error row and the sweep continues); aggregates land last, plus a combined
    ``sweep_report.json`` and a delimited ``runs.csv``.
    """
    access: list = []
    checkpoint, train, val, test = _load_adapt_inputs(cfg, access)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = cfg.methods or [cfg.method]
    fractions = cfg.label_fractions or [cfg.label_fraction]
    alphas = cfg.alphas or [cfg.alpha]
    bin_counts = cfg.bin_counts or [cfg.bins]
    seeds = cfg.seeds or [cfg.seed]
    rows = []
    jsonl_path = out / "runs.jsonl"
    with open(jsonl_path, "w", encoding="utf-8") as jsonl:
        for method, fraction, alpha, bins, seed in product(methods, fractions, alphas, bin_counts, seeds):
            try:
                cell = dataclasses.replace(cfg, method=method, label_fraction=fraction,
                                           alpha=alpha, bins=bins, seed=seed)
                row = adapt_in_memory(checkpoint, train, val, test, cell, seed=seed)
            except Exception as exc:  # record the failure, keep sweeping
                row = {"method": method, "seed": seed, "alpha": alpha, "bins": bins,
                       "label_fraction": fraction, "error": f"{type(exc).__name__}: {exc}"}
            rows.append(row)
            jsonl.write(json.dumps(row) + "\n")
            jsonl.flush()
        aggregates = aggregate_sweep_rows(rows)
        jsonl.write(json.dumps({"aggregates": aggregates}) + "\n")
    report = {"rows": rows, "aggregates": aggregates}
    with open(out / "sweep_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    _write_rows_csv(out / "runs.csv", rows)
    return report


def _write_rows_csv(path, rows) -> None:
    columns = ["method", "seed", "alpha", "c", "bins", "label_fraction", "rmse", "pbcor", "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(col) is None else row.get(col) for col in columns])


def run_fit_prior(cfg: ExperimentConfig) -> dict:
    """Fit a label prior to the labeled rows of a CSV (in its own label units)
    and write the serialized prior plus a density curve CSV."""
    if not cfg.target_train:
        raise ValueError("fit-prior needs a labels CSV via target_train")
    access: list = []
    ds = _tracked_load_csv(cfg.target_train, access)
    labels = ds.labels[ds.labeled]
    if labels.size == 0:
        raise ValueError("no labeled rows to fit a prior on")
    if cfg.prior_form == "histogram":
        prior = fit_histogram_prior(labels, cfg.prior_bins)
    elif cfg.prior_form == "uniform":
        prior = UniformPrior(float(labels.min()), float(labels.max()))
    else:
        prior = MixturePrior(em_fit(labels, MixtureSpec(cfg.prior_gaussians, cfg.prior_exponentials), cfg.seed))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prior_path = out / "prior.json"
    with open(prior_path, "w", encoding="utf-8") as fh:
        json.dump(prior_to_dict(prior), fh, indent=2)
    lo, hi = float(labels.min()), float(labels.max())
    pad = 0.1 * (hi - lo) if hi > lo else 1.0
    ys = np.linspace(lo - pad, hi + pad, 256)
    logd = prior_log_density(prior, ys)
    curve_path = out / "prior_density.csv"
    with open(curve_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "log_density", "density"])
        for yv, ld in zip(ys, logd):
            writer.writerow([repr(float(yv)), repr(float(ld)), repr(float(np.exp(ld)))])
    return {"prior": str(prior_path), "density_curve": str(curve_path)}


def run_evaluate(cfg: ExperimentConfig) -> dict:
    """Score a checkpoint on a fully labeled CSV in original label units."""
    if not cfg.source_checkpoint or not cfg.target_test:
        raise ValueError("evaluate needs source_checkpoint and target_test")
    access: list = []
    _note(access, cfg.source_checkpoint)
    checkpoint = load_checkpoint(cfg.source_checkpoint)
    if checkpoint.scaler is None:
        raise ValueError("checkpoint carries no scaler")
    test = _tracked_load_csv(cfg.target_test, access)
    pair = evaluate(checkpoint.params, test, checkpoint.scaler)
    return {
        "rmse": pair.rmse,
        "pbcor": None if math.isnan(pair.pbcor) else pair.pbcor,
        "files_opened": access,
    }


def measure_phase_times(n_rows: int, bins: int, epochs: int = 5, batch_size: int = 64,
                        d: int = 4, label_fraction: float = 0.05, seed: int = 0):
    """Median per-epoch pseudo-label-selection and total wall time on a synthetic fit.

    The first epoch is treated as warmup and excluded from the medians.
    """
    spec = default_scenario(seed=seed, d=d, n_source=50, n_target_train=n_rows,
                            n_target_val=1, n_target_test=1)
    _, train, _, _ = generate_synthetic(spec)
    masked = stratified_label_mask(train, label_fraction, seed=seed)
    scaler = fit_scaler(train)
    scaled = apply_scaler(masked, scaler)
    labeled = scaled.labels[scaled.labeled]
    grid = make_bin_grid(bins, labels=labeled)
    prior = UniformPrior(grid.lo, grid.hi)
    net = MlpSpec((d, 16, 1))
    config = CraftConfig(alpha=0.1, c=0.5, grid=grid, prior=prior, batch_size=batch_size,
                         epochs=epochs, seed=seed, model_selection="final")
    _, report = fit_craft(init_params(net, seed), scaled, config)
    select = [row["select_s"] for row in report.epochs[1:]]
    wall = [row["wall_s"] for row in report.epochs[1:]]
    return float(np.median(select)), float(np.median(wall))
