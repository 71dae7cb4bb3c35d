"""Shared fixtures.

The expensive fixtures (trained default pipeline, zero-residual variant)
build into an on-disk cache keyed by the run-config hash; the pipeline's own
stage manifests make reruns cheap, so the first full test run pays the
training cost once and later runs reuse the artifacts.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from rdecast.cell import nca_like_params
from rdecast.cli import (
    RunConfig,
    run_pipeline,
    stage_gen_truth,
    stage_train_hybrid,
)
from rdecast.datagen import CurrentProfile, synth_drive_cycle
from rdecast.hybrid import VirtualCell, generate_training_pairs, train_output_head
from rdecast.neural import TrainConfig
from rdecast.rde import RdePredictor

CACHE_ROOT = Path(
    os.environ.get("RDECAST_TEST_CACHE", Path(__file__).resolve().parent.parent / ".pipeline_cache")
)


@pytest.fixture(scope="session")
def default_run():
    """Config and artifact directory of the fully trained default pipeline."""
    cfg = RunConfig.load(None)
    out = CACHE_ROOT / f"default-{cfg.hash()}"
    run_pipeline(cfg, out)
    return cfg, out


@pytest.fixture(scope="session")
def default_predictor(default_run):
    _, out = default_run
    return RdePredictor.load(out / "model")


@pytest.fixture(scope="session")
def zero_residual_run():
    """Gen-truth + hybrid training with all residual coefficients zero."""
    cfg = RunConfig.load(None)
    cfg.residuals = {"alpha_r": 0.0, "beta_r": 0.0, "gamma_q": 0.0, "z_ref": 8.0}
    out = CACHE_ROOT / f"zero-residual-{cfg.hash()}"
    stage_gen_truth(cfg, out)
    manifest = stage_train_hybrid(cfg, out)
    return cfg, out, manifest["metrics"]


@pytest.fixture(scope="session")
def tiny_truth():
    """Small virtual-cell truth set for quick head training in unit tests."""
    cell = VirtualCell(nca_like_params(), z_ref=8.0)
    profiles = [
        CurrentProfile(((900.0, 1.5),)),
        CurrentProfile(((240.0, 5.0),)),
        synth_drive_cycle(77, 600.0, 8.0),
    ]
    return generate_training_pairs(cell, profiles, 25.0, step=0.02)


@pytest.fixture(scope="session")
def trained_tiny_heads(tiny_truth):
    """Coarsely trained voltage/temperature heads (fast, unit-test grade)."""
    cfg = TrainConfig(learning_rate=3e-3, batch_size=256, epochs=60, seed=5, patience=60)
    v_head, _ = train_output_head(tiny_truth.voltage_inputs(), tiny_truth.true_voltage, cfg)
    t_head, _ = train_output_head(tiny_truth.temp_inputs(), tiny_truth.true_surface_temp, cfg)
    return v_head, t_head


@pytest.fixture(scope="session")
def tiny_hybrid_model(trained_tiny_heads):
    from rdecast.hybrid import HybridCellModel

    v_head, t_head = trained_tiny_heads
    return HybridCellModel(nca_like_params(), v_head, t_head)
