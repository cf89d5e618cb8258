import dataclasses

import pytest

from craft.harness import ExperimentConfig, default_scenario, run_synth, run_train_source


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    """Small end-to-end workspace: synthetic CSVs plus a trained source checkpoint."""
    root = tmp_path_factory.mktemp("workspace")
    spec = default_scenario(seed=5, d=3, n_source=600, n_target_train=300,
                            n_target_val=100, n_target_test=200)
    synth_cfg = ExperimentConfig(scenario=spec, out_dir=str(root / "data"))
    paths = run_synth(synth_cfg)
    train_cfg = dataclasses.replace(
        synth_cfg,
        out_dir=str(root / "source_model"),
        source_train=paths["source"],
        hidden_layers=(16, 16),
        epochs=40,
        learning_rate=3e-3,
        seed=0,
    )
    trained = run_train_source(train_cfg)
    return {
        "root": root,
        "spec": spec,
        "paths": paths,
        "checkpoint": trained["checkpoint"],
        "source_val_rmse": trained["val_rmse"],
    }
