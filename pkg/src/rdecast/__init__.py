"""Rate-dependent remaining discharge energy prediction for lithium-ion cells.

A library and CLI that builds a hybrid physics-plus-network cell model from
synthetic ground truth, trains a fast network predictor of the remaining
discharge time and energy under constant-rate loads with voltage and
temperature limits, and validates it against a forward-simulation oracle.
"""

from .cell import (
    CellParams,
    CellState,
    ElectricalParams,
    OcvCurve,
    OperatingLimits,
    ThermalParams,
    lfp_like_params,
    nca_like_params,
)
from .datagen import CurrentProfile, branch_out_generate, evtol_profile, synth_drive_cycle
from .hybrid import HybridCellModel, VirtualCell, generate_training_pairs, train_hybrid_model
from .neural import Mlp, TrainConfig, mlp_forward, mlp_train
from .propagator import PropagatorCache, Trajectory, propagate, rk4_simulate
from .rde import RdePredictor, RdeResult, oracle_rde, predict_rde, traditional_rde

__version__ = "0.1.0"

__all__ = [
    "CellParams",
    "CellState",
    "ElectricalParams",
    "ThermalParams",
    "OcvCurve",
    "OperatingLimits",
    "CurrentProfile",
    "HybridCellModel",
    "VirtualCell",
    "Mlp",
    "TrainConfig",
    "PropagatorCache",
    "Trajectory",
    "RdePredictor",
    "RdeResult",
    "nca_like_params",
    "lfp_like_params",
    "synth_drive_cycle",
    "evtol_profile",
    "branch_out_generate",
    "generate_training_pairs",
    "train_hybrid_model",
    "mlp_forward",
    "mlp_train",
    "propagate",
    "rk4_simulate",
    "predict_rde",
    "oracle_rde",
    "traditional_rde",
    "__version__",
]
