"""Hybrid cell model (linear physics state + neural output heads) and the
virtual cell that stands in for laboratory ground truth.

The hybrid model propagates the physics state exactly (the heads never feed
back into the state) and corrects the outputs with two small networks: a
voltage head on ``(Vb, Vs, V1, Tcore, Tsurf, I)`` and a surface-temperature
head on ``(Vb, Tcore, Tsurf)``.  The virtual cell is the same physics plus
fixed smooth residuals on the ohmic drop and the core heat input; it defines
the truth the heads are trained against, so every accuracy number in the
test suite is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .cell import CellParams, CellState, OperatingLimits, equilibrium_state
from .neural import Mlp, TrainConfig, mlp_forward, mlp_load_file, mlp_save_file, mlp_train, new_mlp
from .propagator import (
    CellDynamics,
    PropagatorCache,
    SimulationError,
    StopReason,
    Trajectory,
    propagate_each,
    propagate_grid,
    propagate_state,
    rk4_simulate,
    step_matrices,
)

__all__ = [
    "HybridCellModel",
    "VirtualCell",
    "SimRecord",
    "TruthData",
    "virtual_cell_simulate",
    "generate_training_pairs",
    "base_state_trajectory",
    "train_output_head",
    "train_hybrid_model",
    "hybrid_outputs",
    "rmse",
    "DEFAULT_RESIDUALS",
]

# Default virtual-cell residual coefficients per cell class:
# (alpha_r [1/degC], beta_r [-], gamma_q [-], z_ref [C-rate]).
DEFAULT_RESIDUALS = {
    "nca-like": {"alpha_r": 0.01, "beta_r": 0.3, "gamma_q": 0.2, "z_ref": 8.0},
    "lfp-like": {"alpha_r": 0.01, "beta_r": 0.3, "gamma_q": 0.2, "z_ref": 15.0},
}


def rmse(pred, truth) -> float:
    """Root-mean-square error between two equal-length series."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("rmse needs two non-empty series of equal length")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def base_state_trajectory(
    cache: PropagatorCache, profile, s0: CellState, t_amb: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact base-physics states along a profile at its sampling interval.

    Returns ``(times, states, currents)`` for the full profile horizon; the
    current at each sample is right-continuous (a segment boundary sample
    carries the opening segment's current, matching the integrator).
    """
    g = profile.sample_interval
    x = s0.as_array()
    all_t = [np.array([0.0])]
    all_x = [x[None, :].copy()]
    t0 = 0.0
    for duration, rate in profile.segments:
        n = int(round(duration / g))
        if n == 0:
            continue
        dts = g * np.arange(1, n + 1)
        seg = propagate_grid(x, rate, t_amb, dts, cache)
        all_t.append(t0 + dts)
        all_x.append(seg)
        x = seg[-1].copy()
        t0 += duration
    times = np.concatenate(all_t)
    states = np.vstack(all_x)
    currents = -profile.rates_at(times) * cache.c_o
    return times, states, currents


class HybridCellModel:
    """Physics state dynamics with neural voltage/temperature heads."""

    def __init__(self, params: CellParams, voltage_head: Mlp, temp_head: Mlp):
        if voltage_head.input_width != 6 or voltage_head.output_width != 1:
            raise ValueError("voltage head must map 6 inputs to 1 output")
        if temp_head.input_width != 3 or temp_head.output_width != 1:
            raise ValueError("temperature head must map 3 inputs to 1 output")
        if len(voltage_head.layer_sizes) != 4 or len(temp_head.layer_sizes) != 4:
            raise ValueError("output heads use exactly two hidden layers")
        self.params = params
        self.voltage_head = voltage_head
        self.temp_head = temp_head
        self.cache = PropagatorCache(params.electrical, params.thermal)

    # -- output heads -------------------------------------------------------

    def voltage(self, s: CellState, current: float) -> float:
        return float(mlp_forward(self.voltage_head, np.append(s.as_array(), current))[0])

    def temperature(self, s: CellState) -> float:
        return float(mlp_forward(self.temp_head, s.as_array()[[0, 3, 4]])[0])

    def outputs(self, s: CellState, current: float) -> tuple[float, float]:
        return self.voltage(s, current), self.temperature(s)

    def voltage_batch(self, states: np.ndarray, currents) -> np.ndarray:
        cur = np.broadcast_to(np.asarray(currents, dtype=float), (states.shape[0],))
        return mlp_forward(self.voltage_head, np.column_stack([states, cur]))[:, 0]

    def temperature_batch(self, states: np.ndarray) -> np.ndarray:
        return mlp_forward(self.temp_head, states[:, [0, 3, 4]])[:, 0]

    # -- head-on-propagated-state evaluations ---------------------------------

    def hv_phi(self, s: CellState, z: float, t_amb: float, dt: float) -> float:
        """Voltage head on the closed-form propagated state."""
        x = propagate_state(s.as_array(), z, t_amb, dt, self.cache)
        return float(mlp_forward(self.voltage_head, np.append(x, -z * self.cache.c_o))[0])

    def ht_phi(self, s: CellState, z: float, t_amb: float, dt: float) -> float:
        """Temperature head on the closed-form propagated state."""
        x = propagate_state(s.as_array(), z, t_amb, dt, self.cache)
        return float(mlp_forward(self.temp_head, x[[0, 3, 4]])[0])

    def hv_phi_grid(self, s: CellState, z: float, t_amb: float, dts) -> np.ndarray:
        states = propagate_grid(s.as_array(), z, t_amb, np.asarray(dts, dtype=float), self.cache)
        return self.voltage_batch(states, -z * self.cache.c_o)

    def ht_phi_grid(self, s: CellState, z: float, t_amb: float, dts) -> np.ndarray:
        states = propagate_grid(s.as_array(), z, t_amb, np.asarray(dts, dtype=float), self.cache)
        return self.temperature_batch(states)

    def hv_phi_each(self, states: np.ndarray, z: float, t_amb: float, dts: np.ndarray) -> np.ndarray:
        """Voltage head on per-state horizons (batched bisection workhorse)."""
        out = propagate_each(states, z, t_amb, dts, self.cache)
        return self.voltage_batch(out, -z * self.cache.c_o)

    def ht_phi_each(self, states: np.ndarray, z: float, t_amb: float, dts: np.ndarray) -> np.ndarray:
        out = propagate_each(states, z, t_amb, dts, self.cache)
        return self.temperature_batch(out)

    def state_trajectory(self, profile, s0: CellState, t_amb: float):
        return base_state_trajectory(self.cache, profile, s0, t_amb)

    def dense_scan(
        self,
        s: CellState,
        z: float,
        t_amb: float,
        vmin: float,
        tmax: float | None,
        grid: float = 1.0,
        max_steps: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray, int, int]:
        """Constant-rate scan on a fixed grid until the voltage cutoff.

        Exact state stepping (closed-form one-step maps) with both heads
        evaluated at every grid point; the compiled hot path of the
        forward-simulation oracle.  Returns ``(v, T, k_v, k_t)`` as in
        :func:`rdecast.kernels.episode_scan`.
        """
        if z <= 0:
            raise ValueError("dense scan requires z > 0")
        if max_steps is None:
            max_steps = int(2.0 * 3600.0 / (z * grid)) + 600
        m_e, c_e, m_t, c_t = step_matrices(self.cache, z, t_amb, grid)
        vh, th = self.voltage_head, self.temp_head
        v_arr, t_arr, k_v, k_t = kernels.episode_scan(
            m_e,
            c_e,
            m_t,
            c_t,
            s.as_array(),
            -z * self.cache.c_o,
            vh.weights[0],
            vh.biases[0],
            vh.weights[1],
            vh.biases[1],
            vh.weights[2][:, 0].copy(),
            float(vh.biases[2][0]),
            vh.norm.mean,
            vh.norm.scale,
            th.weights[0],
            th.biases[0],
            th.weights[1],
            th.biases[1],
            th.weights[2][:, 0].copy(),
            float(th.biases[2][0]),
            th.norm.mean,
            th.norm.scale,
            vmin,
            np.inf if tmax is None else float(tmax),
            tmax is not None,
            max_steps,
        )
        if k_v < 0:
            raise SimulationError(
                f"voltage never crossed {vmin} V within {max_steps} grid steps at z = {z}"
            )
        return v_arr, t_arr, k_v, k_t

    # -- persistence -----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.params.save(directory / "cell.json")
        mlp_save_file(self.voltage_head, directory / "voltage_head.json")
        mlp_save_file(self.temp_head, directory / "temp_head.json")

    @staticmethod
    def load(directory: str | Path) -> "HybridCellModel":
        directory = Path(directory)
        return HybridCellModel(
            CellParams.load(directory / "cell.json"),
            mlp_load_file(directory / "voltage_head.json"),
            mlp_load_file(directory / "temp_head.json"),
        )


def hybrid_outputs(model: HybridCellModel, s: CellState, current: float) -> tuple[float, float]:
    """Pure evaluation of both output heads."""
    return model.outputs(s, current)


@dataclass(frozen=True)
class VirtualCell:
    """Ground-truth cell: base physics plus fixed smooth residuals.

    The residuals scale the ohmic voltage drop with core temperature
    (``alpha_r``) and relative current (``beta_r``), and add a
    relative-current fraction of extra core heat (``gamma_q``); ``z_ref`` is
    the rate normalizer.  All-zero coefficients reproduce the plain physics
    model exactly.
    """

    params: CellParams
    alpha_r: float = 0.01
    beta_r: float = 0.3
    gamma_q: float = 0.2
    z_ref: float = 8.0
    t_ref: float = 25.0

    def dynamics(self) -> CellDynamics:
        window = (0.5 * self.params.limits.Vmin, 1.5 * self.params.ocv.v_max)
        return CellDynamics(
            self.params,
            alpha_r=self.alpha_r,
            beta_r=self.beta_r,
            gamma_q=self.gamma_q,
            z_ref=self.z_ref,
            t_ref=self.t_ref,
            limit_channel="surface",
            validity_window=window,
        )

    def full_charge_state(self) -> CellState:
        return equilibrium_state(1.0, self.params.limits.Tamb)


def virtual_cell_simulate(
    cell: VirtualCell,
    profile,
    s0: CellState | None = None,
    t_amb: float | None = None,
    limits: OperatingLimits | None = None,
    step: float = 0.01,
) -> Trajectory:
    """Integrate the virtual cell over a discharge profile (RK4 truth path)."""
    if any(rate < 0 for _, rate in profile.segments):
        raise ValueError("virtual cell profiles are discharge-only (rates >= 0)")
    if s0 is None:
        s0 = cell.full_charge_state()
    if t_amb is None:
        t_amb = limits.Tamb if limits is not None else cell.params.limits.Tamb
    return rk4_simulate(cell.dynamics(), s0, profile, step=step, limits=limits, t_amb=t_amb)


@dataclass(frozen=True)
class SimRecord:
    """One supervised sample for the output heads."""

    time: float
    current: float
    true_voltage: float
    true_surface_temp: float
    base_state: CellState


@dataclass
class TruthData:
    """Column-wise training records from virtual-cell runs.

    ``base_states`` come from the unmodified physics model under the same
    current profile; the voltage/temperature targets come from the virtual
    cell.
    """

    times: np.ndarray
    currents: np.ndarray
    true_voltage: np.ndarray
    true_surface_temp: np.ndarray
    base_states: np.ndarray
    profile_ids: np.ndarray

    def __len__(self) -> int:
        return self.times.shape[0]

    def record(self, i: int) -> SimRecord:
        return SimRecord(
            float(self.times[i]),
            float(self.currents[i]),
            float(self.true_voltage[i]),
            float(self.true_surface_temp[i]),
            CellState.from_array(self.base_states[i]),
        )

    def voltage_inputs(self) -> np.ndarray:
        return np.column_stack([self.base_states, self.currents])

    def temp_inputs(self) -> np.ndarray:
        return self.base_states[:, [0, 3, 4]]

    @staticmethod
    def concatenate(parts: list["TruthData"]) -> "TruthData":
        return TruthData(
            np.concatenate([p.times for p in parts]),
            np.concatenate([p.currents for p in parts]),
            np.concatenate([p.true_voltage for p in parts]),
            np.concatenate([p.true_surface_temp for p in parts]),
            np.vstack([p.base_states for p in parts]),
            np.concatenate([p.profile_ids for p in parts]),
        )


def generate_training_pairs(
    cell: VirtualCell,
    profiles: list,
    t_amb: float,
    step: float = 0.01,
    profile_id_offset: int = 0,
) -> TruthData:
    """Run the virtual cell over each profile and pair its truth outputs with
    base-model states computed under the identical current.

    Profiles run to their horizon or the virtual cell's voltage cutoff; no
    temperature cap is applied, because the downstream episodes must learn
    thermal behavior beyond the operating limit.  Samples lie on the
    profile's sampling grid (the sub-grid refined cutoff sample is dropped).
    """
    cache = PropagatorCache(cell.params.electrical, cell.params.thermal)
    lims = cell.params.limits
    vc_limits = OperatingLimits(lims.Vmin, np.inf, t_amb)
    parts = []
    for k, profile in enumerate(profiles):
        traj = virtual_cell_simulate(cell, profile, t_amb=t_amb, limits=vc_limits, step=step)
        m = traj.times.shape[0]
        if traj.stop_reason is not StopReason.HORIZON_REACHED:
            m -= 1  # final sample is the refined cutoff, off the sampling grid
        times, states, currents = base_state_trajectory(
            cache, profile, cell.full_charge_state(), t_amb
        )
        if m > times.shape[0] or not np.allclose(times[:m], traj.times[:m]):
            raise SimulationError("truth and base-state grids failed to align")
        parts.append(
            TruthData(
                times=times[:m].copy(),
                currents=currents[:m].copy(),
                true_voltage=traj.voltages[:m].copy(),
                true_surface_temp=traj.states[:m, 4].copy(),
                base_states=states[:m].copy(),
                profile_ids=np.full(m, profile_id_offset + k, dtype=int),
            )
        )
    return TruthData.concatenate(parts)


def _fold_target_scaling(net: Mlp, y_mean: float, y_std: float) -> Mlp:
    """Fold target standardization back into the linear output layer."""
    folded = net.copy()
    folded.weights[-1] = folded.weights[-1] * y_std
    folded.biases[-1] = folded.biases[-1] * y_std + y_mean
    return folded


def train_output_head(
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    hidden: tuple[int, int] = (48, 48),
    sample_weights: np.ndarray | None = None,
):
    """Train one regression head on standardized targets.

    The target standardization is folded into the linear output layer
    afterwards, so the returned network predicts in physical units.
    Returns ``(net, TrainResult)``.
    """
    y = np.asarray(targets, dtype=float)
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std < 1e-12:
        y_std = 1.0
    net0 = new_mlp((inputs.shape[1], hidden[0], hidden[1], 1), cfg.seed)
    result = mlp_train(net0, inputs, (y - y_mean) / y_std, cfg, sample_weights)
    return _fold_target_scaling(result.net, y_mean, y_std), result


def train_hybrid_model(
    params: CellParams,
    truth: TruthData,
    cfg_voltage: TrainConfig,
    cfg_temp: TrainConfig,
    holdout: TruthData | None = None,
) -> tuple[HybridCellModel, dict]:
    """Fit both output heads and report held-out RMSEs.

    ``holdout`` (trajectories from profiles unseen in training) is evaluated
    with the trained heads; without it the report carries NaNs.
    """
    if len(truth) == 0:
        raise ValueError("empty training data")
    v_head, v_result = train_output_head(truth.voltage_inputs(), truth.true_voltage, cfg_voltage)
    t_head, t_result = train_output_head(truth.temp_inputs(), truth.true_surface_temp, cfg_temp)
    model = HybridCellModel(params, v_head, t_head)
    report = {
        "voltage_epochs": len(v_result.train_losses),
        "temp_epochs": len(t_result.train_losses),
        "holdout_voltage_rmse": float("nan"),
        "holdout_temp_rmse": float("nan"),
    }
    if holdout is not None and len(holdout) > 0:
        v_pred = mlp_forward(v_head, holdout.voltage_inputs())[:, 0]
        t_pred = mlp_forward(t_head, holdout.temp_inputs())[:, 0]
        report["holdout_voltage_rmse"] = rmse(v_pred, holdout.true_voltage)
        report["holdout_temp_rmse"] = rmse(t_pred, holdout.true_surface_temp)
    return model, report
