import builtins
import dataclasses
import json
import math

import jsonschema
import numpy as np
import pytest

from craft.cli import main
from craft.data import load_csv
from craft.harness import (
    ExperimentConfig,
    RUN_REPORT_SCHEMA,
    default_scenario,
    run_adapt,
    run_evaluate,
    run_fit_prior,
    run_sweep,
    run_synth,
)
from craft.network import load_checkpoint
from craft.priors import mixture_log_density, prior_from_dict


def strip_timing(report: dict) -> dict:
    out = json.loads(json.dumps(report))
    out.pop("report_path", None)
    for row in out.get("epochs", []):
        for key in ("wall_s", "select_s", "step_s"):
            row.pop(key, None)
    return out


def adapt_config(ws, tmp_path, **overrides) -> ExperimentConfig:
    base = dict(
        source_checkpoint=ws["checkpoint"],
        target_train=ws["paths"]["target_train"],
        target_val=ws["paths"]["target_val"],
        target_test=ws["paths"]["target_test"],
        out_dir=str(tmp_path / "out"),
        hidden_layers=(16, 16),
        epochs=6,
        learning_rate=1e-3,
        label_fraction=0.2,
        bins=60,
        seed=3,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestSynthCommand:
    def test_writes_splits_and_sidecar(self, tmp_path):
        spec = default_scenario(seed=1, d=2, n_source=20, n_target_train=15,
                                n_target_val=5, n_target_test=5)
        paths = run_synth(ExperimentConfig(scenario=spec, out_dir=str(tmp_path)))
        for name, n in [("source", 20), ("target_train", 15), ("target_val", 5), ("target_test", 5)]:
            ds = load_csv(paths[name])
            assert ds.n == n and ds.d == 2
        sidecar = json.loads((tmp_path / "scenario.json").read_text())
        assert sidecar["d"] == 2 and sidecar["seed"] == 1


class TestTrainSource:
    def test_checkpoint_is_loadable_and_fits(self, tiny_workspace):
        ckpt = load_checkpoint(tiny_workspace["checkpoint"])
        assert ckpt.scaler is not None
        assert ckpt.params.spec.input_dim == 3
        # a trained source model should comfortably beat the label spread
        assert tiny_workspace["source_val_rmse"] < 1.0


class TestAdapt:
    def test_tl_equals_craft_alpha_zero(self, tiny_workspace, tmp_path):
        cfg_tl = adapt_config(tiny_workspace, tmp_path, method="tl")
        cfg_craft = adapt_config(tiny_workspace, tmp_path, method="craft", alpha=0.0)
        report_tl = run_adapt(cfg_tl)
        report_craft = run_adapt(cfg_craft)
        assert report_tl["rmse"] == report_craft["rmse"]

    def test_report_validates_against_schema(self, tiny_workspace, tmp_path):
        for method in ("craft", "tl", "naive"):
            report = run_adapt(adapt_config(tiny_workspace, tmp_path / method, method=method))
            report.pop("report_path")
            jsonschema.validate(instance=report, schema=RUN_REPORT_SCHEMA)

    def test_reports_reproducible_except_wall_times(self, tiny_workspace, tmp_path):
        cfg_a = adapt_config(tiny_workspace, tmp_path / "a", method="craft")
        cfg_b = adapt_config(tiny_workspace, tmp_path / "b", method="craft")
        a = strip_timing(run_adapt(cfg_a))
        b = strip_timing(run_adapt(cfg_b))
        a["files_opened"] = b["files_opened"] = None
        assert a == b

    def test_source_files_never_opened(self, tiny_workspace, tmp_path, monkeypatch):
        cfg = adapt_config(tiny_workspace, tmp_path, method="craft")
        opened = []
        real_open = builtins.open

        def spy(file, *args, **kwargs):
            opened.append(str(file))
            return real_open(file, *args, **kwargs)

        monkeypatch.setattr(builtins, "open", spy)
        report = run_adapt(cfg)
        source_csv = tiny_workspace["paths"]["source"]
        assert all(source_csv not in path for path in opened)
        assert all(source_csv not in path for path in report["files_opened"])
        assert any(tiny_workspace["checkpoint"] in path for path in report["files_opened"])

    def test_bias_and_true_marginal_prior_path(self, tiny_workspace, tmp_path):
        cfg = adapt_config(tiny_workspace, tmp_path, method="craft",
                           bias_keep_above=0.2, label_fraction=0.4,
                           prior_source="true_marginal", model_selection="final")
        report = run_adapt(cfg)
        assert report["rmse"] > 0
        assert sum(report["pseudo_label_hist"]) > 0

    def test_prior_file_round_trip(self, tiny_workspace, tmp_path):
        prior_cfg = ExperimentConfig(target_train=tiny_workspace["paths"]["target_train"],
                                     out_dir=str(tmp_path / "prior"), prior_form="mixture",
                                     prior_gaussians=1, prior_exponentials=0)
        produced = run_fit_prior(prior_cfg)
        cfg = adapt_config(tiny_workspace, tmp_path, method="craft",
                           prior_source="file", prior_file=produced["prior"])
        report = run_adapt(cfg)
        assert report["rmse"] > 0
        assert any(produced["prior"] in p for p in report["files_opened"])

    def test_wrong_dimension_checkpoint_errors(self, tiny_workspace, tmp_path):
        spec = default_scenario(seed=2, d=5, n_source=30, n_target_train=30,
                                n_target_val=10, n_target_test=10)
        other = run_synth(ExperimentConfig(scenario=spec, out_dir=str(tmp_path / "other")))
        cfg = adapt_config(tiny_workspace, tmp_path, target_train=other["target_train"],
                           target_val=None, target_test=other["target_test"])
        with pytest.raises(ValueError, match="features"):
            run_adapt(cfg)


class TestSweep:
    def test_rows_reproducible_and_aggregates_recomputable(self, tiny_workspace, tmp_path):
        def sweep_into(out):
            cfg = adapt_config(tiny_workspace, tmp_path, out_dir=str(out), epochs=4)
            cfg = dataclasses.replace(cfg, methods=["tl", "craft"], seeds=[0, 1],
                                      label_fractions=[0.2], alphas=[0.1], bin_counts=[40])
            return run_sweep(cfg), out

        report_a, out_a = sweep_into(tmp_path / "s1")
        report_b, out_b = sweep_into(tmp_path / "s2")
        rows_a = [strip_timing(r) for r in report_a["rows"]]
        rows_b = [strip_timing(r) for r in report_b["rows"]]
        assert rows_a == rows_b
        # aggregates equal a recomputation from the row data
        from craft.harness import aggregate_sweep_rows
        assert report_a["aggregates"] == aggregate_sweep_rows(report_a["rows"])
        lines = (out_a / "runs.jsonl").read_text().splitlines()
        assert len(lines) == len(rows_a) + 1
        assert "aggregates" in json.loads(lines[-1])
        assert (out_a / "runs.csv").read_text().splitlines()[0].startswith("method,seed,alpha")

    def test_partial_failures_recorded(self, tiny_workspace, tmp_path):
        cfg = adapt_config(tiny_workspace, tmp_path, out_dir=str(tmp_path / "s"), epochs=2)
        cfg = dataclasses.replace(cfg, methods=["craft"], seeds=[0], bin_counts=[2, 40])
        report = run_sweep(cfg)
        errors = [r for r in report["rows"] if "error" in r]
        good = [r for r in report["rows"] if "error" not in r]
        assert len(errors) == 1 and len(good) == 1
        assert "ValueError" in errors[0]["error"]


class TestFitPrior:
    def test_density_curve_matches_log_density(self, tiny_workspace, tmp_path):
        cfg = ExperimentConfig(target_train=tiny_workspace["paths"]["target_train"],
                               out_dir=str(tmp_path), prior_form="mixture",
                               prior_gaussians=2, prior_exponentials=1, seed=4)
        produced = run_fit_prior(cfg)
        prior = prior_from_dict(json.loads((tmp_path / "prior.json").read_text()))
        rows = (tmp_path / "prior_density.csv").read_text().splitlines()[1:]
        assert len(rows) == 256
        for line in rows[::17]:
            y, logd, dens = (float(v) for v in line.split(","))
            assert abs(mixture_log_density(prior.params, y) - logd) < 1e-12
            assert abs(math.exp(logd) - dens) < 1e-12


class TestEvaluateCommand:
    def test_scores_checkpoint(self, tiny_workspace):
        cfg = ExperimentConfig(source_checkpoint=tiny_workspace["checkpoint"],
                               target_test=tiny_workspace["paths"]["target_test"])
        result = run_evaluate(cfg)
        assert result["rmse"] > 0
        assert -1.0 <= result["pbcor"] <= 1.0


class TestCli:
    def test_synth_and_error_paths(self, tmp_path, capsys):
        spec = default_scenario(seed=1, d=2, n_source=12, n_target_train=12,
                                n_target_val=4, n_target_test=4)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"scenario": spec.to_dict()}))
        code = main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "d")])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert (tmp_path / "d" / "source.csv").exists()
        assert out["scenario"].endswith("scenario.json")

        code = main(["adapt", "--config", str(cfg_path), "--out", str(tmp_path / "x")])
        captured = capsys.readouterr()
        assert code != 0
        err = json.loads(captured.err)
        assert err["error"] == "ValueError"
        assert "checkpoint" in err["message"]

    def test_full_pipeline_via_cli(self, tiny_workspace, tmp_path, capsys):
        ws = tiny_workspace
        cfg_path = tmp_path / "adapt.json"
        cfg_path.write_text(json.dumps({
            "source_checkpoint": ws["checkpoint"],
            "target_train": ws["paths"]["target_train"],
            "target_val": ws["paths"]["target_val"],
            "target_test": ws["paths"]["target_test"],
            "epochs": 4,
            "learning_rate": 1e-3,
            "bins": 40,
        }))
        code = main(["adapt", "--config", str(cfg_path), "--method", "craft",
                     "--label-fraction", "0.2", "--alpha", "0.1", "--seed", "2",
                     "--out", str(tmp_path / "run"), "--prior", "fit"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["method"] == "craft" and report["seed"] == 2
        assert (tmp_path / "run" / "report_craft_seed2.json").exists()

        code = main(["evaluate", "--checkpoint", ws["checkpoint"],
                     "--data", ws["paths"]["target_test"]])
        assert code == 0
        assert "rmse" in json.loads(capsys.readouterr().out)

    def test_env_path_override(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CRAFT_OUT_DIR", str(tmp_path / "env_out"))
        spec = default_scenario(seed=1, d=2, n_source=8, n_target_train=8,
                                n_target_val=4, n_target_test=4)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"scenario": spec.to_dict()}))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        capsys.readouterr()
        assert (tmp_path / "env_out" / "source.csv").exists()

    def test_unknown_config_key_errors(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"not_a_knob": 1}))
        assert main(["synth", "--config", str(cfg_path)]) != 0
        err = json.loads(capsys.readouterr().err)
        assert "not_a_knob" in err["message"]
