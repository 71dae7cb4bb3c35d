"""Closed-form propagation of the linear cell state, plus the RK4 oracle.

The combined electrical/thermal dynamics are block-diagonal and linear, so
the state after any interval under constant current and ambient temperature
has an exact solution.  Each block's matrix exponential is reconstructed
from its (real, distinct) eigenvalues through the Cayley-Hamilton identity:

    exp(A*dt) = sum_i a_i(dt) * A**(i-1),   a(dt) = Psi^{-1} @ [exp(lam_i*dt)]

with ``Psi`` the Vandermonde matrix of the eigenvalues.  The input integral
uses the same construction with the elementwise integral of the exponentials.
The electrical block has one zero eigenvalue (total charge is conserved), so
the integral is evaluated as ``expm1(lam*dt)/lam`` with a power-series branch
near ``lam*dt = 0`` instead of the singular antiderivative ``exp/lam``.

``rk4_simulate`` is the independent fixed-step integrator used both as the
oracle for the closed form and as the virtual-cell truth simulator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .cell import (
    CellModelError,
    CellParams,
    CellState,
    ElectricalParams,
    OperatingLimits,
    ThermalParams,
    ndc_matrices,
    thermal_matrices,
)

__all__ = [
    "SimulationError",
    "IntegrationError",
    "ModelValidityError",
    "EigenSet",
    "PropagatorCache",
    "StopReason",
    "Trajectory",
    "CellDynamics",
    "FuncDynamics",
    "eigenvalues_ndc",
    "eigenvalues_thermal",
    "phi_exp_vector",
    "phi_int_exp_vector",
    "propagate",
    "propagate_state",
    "propagate_grid",
    "propagate_each",
    "step_matrices",
    "rk4_simulate",
]

# Switch to the power series of the exponential integral below this |lam*dt|;
# four series terms keep the relative error under 1e-12 at the branch point.
_SERIES_THRESHOLD = 1e-6


class SimulationError(RuntimeError):
    """Simulation failed."""


class IntegrationError(SimulationError):
    """Non-finite state encountered during integration."""


class ModelValidityError(SimulationError):
    """Simulated output left the model's validity window."""


def eigenvalues_ndc(p: ElectricalParams) -> np.ndarray:
    """Eigenvalues of the electrical block: zero, diffusion, polarization.

    The charge-conserving diffusion pair contributes ``0`` and
    ``-(Cb+Cs)/(Cb*Cs*Rb)``; the polarization RC pair ``-1/(R1*C1)``.
    Verified against the characteristic polynomial at construction.
    """
    lam = np.array(
        [0.0, -(p.Cb + p.Cs) / (p.Cb * p.Cs * p.Rb), -1.0 / (p.R1 * p.C1)]
    )
    gaps = np.abs(lam[1:] - lam[:1]).min(), abs(lam[2] - lam[1])
    scale = np.abs(lam).max()
    if min(gaps) / scale < 1e-9:
        raise CellModelError("degenerate spectrum: electrical eigenvalues nearly coincide")
    a, _ = ndc_matrices(p)
    for lam_i in lam:
        residual = abs(np.linalg.det(a - lam_i * np.eye(3)))
        if residual > 1e-10 * max(1.0, scale) ** 3:
            raise CellModelError(
                f"eigenvalue {lam_i} fails the characteristic polynomial check "
                f"(|det| = {residual:.3e})"
            )
    return lam


def eigenvalues_thermal(p: ThermalParams) -> np.ndarray:
    """The two (real, negative, distinct) eigenvalues of the thermal block."""
    a = p.matrix()
    tr = a[0, 0] + a[1, 1]
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    disc = tr * tr - 4.0 * det
    if disc <= 0.0:
        raise CellModelError("thermal eigenvalues must be real and distinct")
    root = np.sqrt(disc)
    return np.array([(tr - root) / 2.0, (tr + root) / 2.0])


@dataclass(frozen=True)
class EigenSet:
    """Eigenvalues of the two blocks (electrical: 3, thermal: 2)."""

    lambda_ndc: np.ndarray
    lambda_therm: np.ndarray

    def __post_init__(self) -> None:
        lam_e = np.asarray(self.lambda_ndc, dtype=float)
        lam_t = np.asarray(self.lambda_therm, dtype=float)
        if lam_e.shape != (3,) or lam_t.shape != (2,):
            raise CellModelError("EigenSet needs 3 electrical and 2 thermal eigenvalues")
        if np.count_nonzero(lam_e == 0.0) != 1 or np.any(np.delete(lam_e, np.argmax(lam_e == 0.0)) >= 0):
            raise CellModelError("electrical spectrum must be one zero and two negative values")
        if lam_t[0] == lam_t[1] or np.any(lam_t >= 0):
            raise CellModelError("thermal eigenvalues must be distinct and negative")


def phi_exp_vector(lambdas: np.ndarray, dt: float) -> np.ndarray:
    """Elementwise ``exp(lam * dt)``; all ones at ``dt = 0``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return np.exp(np.asarray(lambdas, dtype=float) * dt)


def phi_int_exp_vector(lambdas: np.ndarray, dt: float) -> np.ndarray:
    """Elementwise integral of the exponential over [0, dt].

    Equals ``expm1(lam*dt)/lam`` away from zero and the series
    ``dt*(1 + x/2 + x**2/6 + x**3/24)`` with ``x = lam*dt`` for
    ``|x| < 1e-6``; in particular exactly ``dt`` at ``lam = 0``.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    lam = np.asarray(lambdas, dtype=float)
    x = lam * dt
    small = np.abs(x) < _SERIES_THRESHOLD
    series = dt * (1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0)
    # Guard the division; the masked lanes take the series value.
    lam_safe = np.where(small, 1.0, lam)
    direct = np.expm1(x) / lam_safe
    return np.where(small, series, direct)


def _exp_grid(lambdas: np.ndarray, dts: np.ndarray) -> np.ndarray:
    return np.exp(np.outer(lambdas, dts))


def _int_exp_grid(lambdas: np.ndarray, dts: np.ndarray) -> np.ndarray:
    x = np.outer(lambdas, dts)
    small = np.abs(x) < _SERIES_THRESHOLD
    series = dts[None, :] * (1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0)
    lam_safe = np.where(np.abs(lambdas) < 1e-300, 1.0, lambdas)
    direct = np.expm1(x) / lam_safe[:, None]
    return np.where(small, series, direct)


def _vandermonde_inverse(lam: np.ndarray) -> np.ndarray:
    """Inverse of the Vandermonde matrix [[1, lam_i, lam_i**2, ...]] rows.

    Column ``i`` holds the coefficients of the Lagrange basis polynomial of
    node ``i``, evaluated in closed form (well-conditioned for the small,
    well-separated spectra handled here).
    """
    n = lam.size
    inv = np.empty((n, n))
    for i in range(n):
        # Polynomial prod_{j != i} (x - lam_j) / (lam_i - lam_j).
        coeffs = np.array([1.0])
        denom = 1.0
        for j in range(n):
            if j == i:
                continue
            coeffs = np.convolve(coeffs, np.array([1.0, -lam[j]]))
            denom *= lam[i] - lam[j]
        inv[:, i] = coeffs[::-1] / denom
    return inv


class PropagatorCache:
    """Precomputed spectral data for closed-form propagation of one cell.

    Holds the eigenvalues, the Vandermonde inverses of both blocks, the
    matrix powers entering the Cayley-Hamilton reconstruction, and the input
    vectors with the rate left symbolic (applied per call).  Immutable after
    construction and safe to share across threads.
    """

    def __init__(self, electrical: ElectricalParams, thermal: ThermalParams):
        self.electrical = electrical
        self.thermal = thermal
        self.a_e, self.b_e = ndc_matrices(electrical)
        self.a_t, self.b_t = thermal_matrices(thermal, electrical.R0)
        self.eigenvalues = EigenSet(eigenvalues_ndc(electrical), eigenvalues_thermal(thermal))
        self.psi1_inv = _vandermonde_inverse(self.eigenvalues.lambda_ndc)
        self.psi2_inv = _vandermonde_inverse(self.eigenvalues.lambda_therm)
        # Powers {I, A, A^2} and {I, A_t}; input images under each power.
        self.pow_e = np.stack([np.eye(3), self.a_e, self.a_e @ self.a_e])
        self.pow_t = np.stack([np.eye(2), self.a_t])
        self.pow_e_b = np.stack([self.b_e, self.a_e @ self.b_e, self.a_e @ self.a_e @ self.b_e])
        self.pow_t_b = np.stack(
            [self.b_t, self.a_t @ self.b_t]
        )  # shape (2, 2, 2): power, row, input column
        self.c_o = electrical.c_o

    def exp_coeffs(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Cayley-Hamilton coefficients of both matrix exponentials at dt."""
        return (
            self.psi1_inv @ phi_exp_vector(self.eigenvalues.lambda_ndc, dt),
            self.psi2_inv @ phi_exp_vector(self.eigenvalues.lambda_therm, dt),
        )

    def int_coeffs(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients of both input-integral matrices at dt."""
        return (
            self.psi1_inv @ phi_int_exp_vector(self.eigenvalues.lambda_ndc, dt),
            self.psi2_inv @ phi_int_exp_vector(self.eigenvalues.lambda_therm, dt),
        )

    def phi_matrices(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Matrix exponentials of both blocks at dt (reconstructed)."""
        ce, ct = self.exp_coeffs(dt)
        return np.tensordot(ce, self.pow_e, axes=1), np.tensordot(ct, self.pow_t, axes=1)

    def grid_coeffs(self, dts: np.ndarray):
        """Reconstruction coefficients for a whole horizon grid at once.

        Returns ``(ce, ie, ct, it)`` with shapes (3, m), (3, m), (2, m),
        (2, m): exponential and integral coefficients of the electrical and
        thermal blocks for every ``dts`` entry.
        """
        lam_e = self.eigenvalues.lambda_ndc
        lam_t = self.eigenvalues.lambda_therm
        return (
            self.psi1_inv @ _exp_grid(lam_e, dts),
            self.psi1_inv @ _int_exp_grid(lam_e, dts),
            self.psi2_inv @ _exp_grid(lam_t, dts),
            self.psi2_inv @ _int_exp_grid(lam_t, dts),
        )

    def state_power_stacks(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-state images under the cached matrix powers.

        For a batch of states (n, 5), returns electrical (n, 3, 3) and
        thermal (n, 2, 2) stacks with ``stack[e, i, :] = A**(i-1) @ x_e``;
        these contract against grid coefficients for batched propagation.
        """
        x1 = states[:, :3]
        x2 = states[:, 3:]
        v_e = np.stack([x1, x1 @ self.a_e.T, x1 @ (self.a_e @ self.a_e).T], axis=1)
        v_t = np.stack([x2, x2 @ self.a_t.T], axis=1)
        return v_e, v_t


def _thermal_input(z: float, c_o: float, t_amb: float) -> np.ndarray:
    cur = z * c_o
    return np.array([cur * cur, t_amb])


def propagate_state(
    x: np.ndarray, z: float, t_amb: float, dt: float, cache: PropagatorCache
) -> np.ndarray:
    """Array-level closed-form propagation (see ``propagate``)."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if z < 0:
        raise ValueError("z must be nonnegative (discharge-only)")
    if dt == 0.0:
        return np.asarray(x, dtype=float).copy()
    x = np.asarray(x, dtype=float)
    ce, ct = cache.exp_coeffs(dt)
    ie, it = cache.int_coeffs(dt)
    current = -z * cache.c_o
    x1 = x[:3]
    x2 = x[3:]
    v_e = np.stack([x1, cache.a_e @ x1, cache.a_e @ (cache.a_e @ x1)])
    new_e = ce @ v_e + (ie @ cache.pow_e_b) * current
    u = _thermal_input(z, cache.c_o, t_amb)
    v_t = np.stack([x2, cache.a_t @ x2])
    forcing = np.tensordot(it, cache.pow_t_b, axes=1) @ u
    new_t = ct @ v_t + forcing
    return np.concatenate([new_e, new_t])


def propagate(
    s: CellState, z: float, t_amb: float, dt: float, cache: PropagatorCache
) -> CellState:
    """Closed-form state after ``dt`` seconds at constant C-rate ``z``.

    Exact (to floating point) for the linear dynamics; the internal current
    is ``-z * c_o``.  ``dt = 0`` returns ``s`` unchanged.
    """
    if dt == 0.0:
        if dt < 0 or z < 0:
            raise ValueError("dt and z must be nonnegative")
        return s
    return CellState.from_array(propagate_state(s.as_array(), z, t_amb, dt, cache))


def propagate_grid(
    x: np.ndarray, z: float, t_amb: float, dts: np.ndarray, cache: PropagatorCache
) -> np.ndarray:
    """Propagated states at many horizons at once; returns (len(dts), 5).

    Vectorized over the horizon only: the Cayley-Hamilton coefficients are
    computed for the whole grid and contracted against the cached powers.
    Rows with ``dts == 0`` are the initial state exactly.
    """
    dts = np.asarray(dts, dtype=float)
    if np.any(dts < 0):
        raise ValueError("dt must be nonnegative")
    if z < 0:
        raise ValueError("z must be nonnegative (discharge-only)")
    x = np.asarray(x, dtype=float)
    lam_e = cache.eigenvalues.lambda_ndc
    lam_t = cache.eigenvalues.lambda_therm
    ce = cache.psi1_inv @ _exp_grid(lam_e, dts)  # (3, m)
    ie = cache.psi1_inv @ _int_exp_grid(lam_e, dts)
    ct = cache.psi2_inv @ _exp_grid(lam_t, dts)  # (2, m)
    it = cache.psi2_inv @ _int_exp_grid(lam_t, dts)

    current = -z * cache.c_o
    x1 = x[:3]
    x2 = x[3:]
    v_e = np.stack([x1, cache.a_e @ x1, cache.a_e @ (cache.a_e @ x1)])  # (3, 3)
    states_e = ce.T @ v_e + (ie.T @ cache.pow_e_b) * current
    u = _thermal_input(z, cache.c_o, t_amb)
    v_t = np.stack([x2, cache.a_t @ x2])
    forcing_vecs = np.tensordot(it.T, cache.pow_t_b, axes=1) @ u  # (m, 2)
    states_t = ct.T @ v_t + forcing_vecs

    out = np.concatenate([states_e, states_t], axis=1)
    zero = dts == 0.0
    if np.any(zero):
        out[zero] = x
    return out


def propagate_each(
    states: np.ndarray, z: float, t_amb: float, dts: np.ndarray, cache: PropagatorCache
) -> np.ndarray:
    """Propagate a batch of states, each over its own horizon.

    ``states`` has shape (n, 5) and ``dts`` shape (n,); returns (n, 5).
    """
    states = np.asarray(states, dtype=float)
    dts = np.asarray(dts, dtype=float)
    if np.any(dts < 0) or z < 0:
        raise ValueError("dts and z must be nonnegative")
    ce, ie, ct, it = cache.grid_coeffs(dts)
    v_e, v_t = cache.state_power_stacks(states)
    current = -z * cache.c_o
    out_e = np.einsum("ie,eij->ej", ce, v_e) + (ie.T @ cache.pow_e_b) * current
    u = _thermal_input(z, cache.c_o, t_amb)
    out_t = np.einsum("ie,eij->ej", ct, v_t) + np.tensordot(it.T, cache.pow_t_b, axes=1) @ u
    out = np.concatenate([out_e, out_t], axis=1)
    zero = dts == 0.0
    if np.any(zero):
        out[zero] = states[zero]
    return out


def step_matrices(
    cache: PropagatorCache, z: float, t_amb: float, dt: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact one-step affine maps ``x -> M x + c`` for both blocks.

    Used by the dense scan kernels: stepping with these matrices on a fixed
    grid reproduces the closed-form solution at every grid point (semigroup
    property), with no integration error.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    ce, ct = cache.exp_coeffs(dt)
    ie, it = cache.int_coeffs(dt)
    m_e = np.tensordot(ce, cache.pow_e, axes=1)
    m_t = np.tensordot(ct, cache.pow_t, axes=1)
    current = -z * cache.c_o
    c_e = (ie @ cache.pow_e_b) * current
    u = _thermal_input(z, cache.c_o, t_amb)
    c_t = np.tensordot(it, cache.pow_t_b, axes=1) @ u
    return m_e, c_e, m_t, c_t


# ---------------------------------------------------------------------------
# Trajectories and the RK4 oracle / truth simulator
# ---------------------------------------------------------------------------


class StopReason(enum.Enum):
    HORIZON_REACHED = "horizon"
    VOLTAGE_CUTOFF = "voltage"
    TEMPERATURE_CUTOFF = "temperature"


@dataclass
class Trajectory:
    """Sampled simulation output with a stop record."""

    times: np.ndarray
    states: np.ndarray
    voltages: np.ndarray
    temperatures: np.ndarray
    stop_reason: StopReason
    stop_time: float

    def __post_init__(self) -> None:
        n = self.times.shape[0]
        if not (self.states.shape[0] == self.voltages.shape[0] == self.temperatures.shape[0] == n):
            raise ValueError("trajectory sequences must have equal length")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def final_state(self) -> CellState:
        return CellState.from_array(self.states[-1])


class CellDynamics:
    """Cell dynamics plus output maps, with optional smooth residuals.

    With all residual coefficients zero this is the plain physics model;
    nonzero coefficients scale the ohmic voltage drop with core temperature
    and current magnitude and add a current-dependent fraction of extra core
    heat.  Recognized by ``rk4_simulate`` for the compiled fast path; also
    callable as a plain derivative function ``f(x, I, t_amb)``.
    """

    def __init__(
        self,
        params: CellParams,
        alpha_r: float = 0.0,
        beta_r: float = 0.0,
        gamma_q: float = 0.0,
        z_ref: float = 1.0,
        t_ref: float = 25.0,
        limit_channel: str = "surface",
        validity_window: tuple[float, float] | None = None,
    ):
        self.params = params
        self.alpha_r = float(alpha_r)
        self.beta_r = float(beta_r)
        self.gamma_q = float(gamma_q)
        self.z_ref = float(z_ref)
        self.t_ref = float(t_ref)
        if limit_channel not in ("surface", "core"):
            raise ValueError("limit_channel must be 'surface' or 'core'")
        self.limit_channel = limit_channel
        self.validity_window = validity_window
        self.a_e, self.b_e = ndc_matrices(params.electrical)
        self.a_t, self.b_t = thermal_matrices(params.thermal, params.electrical.R0)
        self.ocv_x, self.ocv_c = params.ocv.coefficient_arrays()
        self.c_o = params.electrical.c_o
        self.i_ref = self.z_ref * self.c_o

    def heat_input(self, current: float) -> float:
        r0 = self.params.electrical.R0
        return r0 * current * current * (1.0 + self.gamma_q * abs(current) / self.i_ref)

    def deriv(self, x: np.ndarray, current: float, t_amb: float) -> np.ndarray:
        dx = np.empty(5)
        dx[:3] = self.a_e @ x[:3] + self.b_e * current
        dx[3] = self.a_t[0] @ x[3:] + self.heat_input(current) / self.params.thermal.C_core
        dx[4] = self.a_t[1] @ x[3:] + self.b_t[1, 1] * t_amb
        return dx

    __call__ = deriv

    def voltage(self, x: np.ndarray, current: float) -> float:
        p = self.params.electrical
        r_mult = 1.0 + self.alpha_r * (x[3] - self.t_ref) + self.beta_r * abs(current) / self.i_ref
        return float(self.params.ocv(x[1], clamp=True)) + x[2] + p.R0 * current * r_mult

    def temp(self, x: np.ndarray) -> float:
        return float(x[3] if self.limit_channel == "core" else x[4])


class FuncDynamics:
    """Adapter giving a plain derivative callable the simulator protocol."""

    def __init__(self, deriv, voltage=None, temp=None, c_o: float = 1.0):
        self._deriv = deriv
        self._voltage = voltage
        self._temp = temp
        self.c_o = c_o

    def deriv(self, x, current, t_amb):
        return self._deriv(x, current, t_amb)

    def voltage(self, x, current):
        if self._voltage is None:
            return np.nan
        return self._voltage(x, current)

    def temp(self, x):
        if self._temp is None:
            return np.nan
        return self._temp(x)


def _segment_steps(profile, step: float) -> tuple[np.ndarray, np.ndarray]:
    durations = np.array([d for d, _ in profile.segments], dtype=float)
    rates = np.array([r for _, r in profile.segments], dtype=float)
    steps = durations / step
    rounded = np.rint(steps)
    if np.any(np.abs(steps - rounded) > 1e-9 * np.maximum(1.0, np.abs(steps))):
        raise ValueError("profile breakpoints must align with the integration step grid")
    return rounded.astype(np.int64), rates


def rk4_simulate(
    model,
    s0: CellState,
    profile,
    step: float = 0.01,
    limits: OperatingLimits | None = None,
    record_interval: float | None = None,
    t_amb: float | None = None,
) -> Trajectory:
    """Classic fourth-order fixed-step integration over a current profile.

    ``profile`` is piecewise constant in C-rate with breakpoints aligned to
    the step grid; the applied current is ``-z * model.c_o``.  With
    ``limits`` given, integration stops at the first step whose voltage drops
    below ``Vmin`` or whose limit-channel temperature reaches ``Tmax``; the
    stop time is then refined by linear interpolation between the two
    bracketing steps and appended as the final sample.

    ``model`` is either a :class:`CellDynamics` (compiled fast path) or any
    object with ``deriv(x, current, t_amb)`` and, when limits are checked,
    ``voltage(x, current)``/``temp(x)`` (see :class:`FuncDynamics`).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    seg_steps, seg_rates = _segment_steps(profile, step)
    if record_interval is None:
        record_interval = getattr(profile, "sample_interval", 1.0)
    record_every = max(1, int(round(record_interval / step)))
    if t_amb is None:
        t_amb = _ambient_of(model, limits)

    if isinstance(model, CellDynamics):
        return _rk4_cell(model, s0, seg_steps, seg_rates, step, record_every, limits, t_amb)
    return _rk4_generic(model, s0, seg_steps, seg_rates, step, record_every, limits, t_amb)


def _ambient_of(model, limits) -> float:
    if limits is not None:
        return limits.Tamb
    params = getattr(model, "params", None)
    if params is not None:
        return params.limits.Tamb
    return 25.0


def _rk4_cell(model, s0, seg_steps, seg_rates, step, record_every, limits, t_amb):
    check = limits is not None
    vmin = limits.Vmin if check else -np.inf
    tmax = limits.Tmax if check else np.inf
    window = model.validity_window
    v_lo, v_hi = window if window is not None else (0.0, -1.0)
    tlim_index = 3 if model.limit_channel == "core" else 4
    seg_current = -seg_rates * model.c_o

    rec_t, rec_x, rec_v, rec_tl, stop_code, stop_step, bracket, _ = kernels.cell_rk4(
        model.a_e,
        model.b_e,
        model.a_t,
        model.b_t[0, 0],
        model.b_t[1, 1],
        model.ocv_x,
        model.ocv_c,
        model.params.electrical.R0,
        model.alpha_r,
        model.beta_r,
        model.gamma_q,
        model.i_ref,
        model.t_ref,
        t_amb,
        seg_steps,
        seg_current,
        s0.as_array(),
        step,
        record_every,
        check,
        vmin,
        tmax,
        tlim_index,
        v_lo,
        v_hi,
    )

    if stop_code == kernels.STOP_NONFINITE:
        raise IntegrationError(f"non-finite state at step {stop_step}")
    if stop_code == kernels.STOP_VALIDITY:
        raise ModelValidityError(
            f"voltage left the validity window [{v_lo}, {v_hi}] at t = {stop_step * step:.2f} s"
        )
    if stop_code == kernels.STOP_HORIZON:
        return Trajectory(rec_t, rec_x, rec_v, rec_tl, StopReason.HORIZON_REACHED, float(rec_t[-1]))

    reason = (
        StopReason.VOLTAGE_CUTOFF
        if stop_code == kernels.STOP_VOLTAGE
        else StopReason.TEMPERATURE_CUTOFF
    )
    if stop_step == 0:
        # Limit already violated at the initial sample: empty discharge.
        return Trajectory(
            rec_t[:1], rec_x[:1], rec_v[:1], rec_tl[:1], reason, 0.0
        )

    t_prev, v_prev, tl_prev = bracket[0], bracket[1], bracket[2]
    x_prev = bracket[3:8]
    t_stop, v_stop, tl_stop = bracket[8], bracket[9], bracket[10]
    x_stop = bracket[11:16]
    if reason is StopReason.VOLTAGE_CUTOFF:
        frac = (v_prev - vmin) / (v_prev - v_stop)
    else:
        frac = (tmax - tl_prev) / (tl_stop - tl_prev)
    frac = min(1.0, max(0.0, frac))
    t_ref = t_prev + frac * (t_stop - t_prev)
    x_ref = x_prev + frac * (x_stop - x_prev)
    v_ref = v_prev + frac * (v_stop - v_prev)
    tl_ref = tl_prev + frac * (tl_stop - tl_prev)

    keep = rec_t < t_ref
    times = np.append(rec_t[keep], t_ref)
    states = np.vstack([rec_x[keep], x_ref])
    volts = np.append(rec_v[keep], v_ref)
    temps = np.append(rec_tl[keep], tl_ref)
    return Trajectory(times, states, volts, temps, reason, float(t_ref))


def _rk4_generic(model, s0, seg_steps, seg_rates, step, record_every, limits, t_amb):
    deriv = model.deriv if hasattr(model, "deriv") else model
    voltage = getattr(model, "voltage", None)
    temp = getattr(model, "temp", None)
    c_o = getattr(model, "c_o", 1.0)
    check = limits is not None
    if check and voltage is None:
        raise ValueError("limit checking requires a model with a voltage output")

    x = s0.as_array()
    t = 0.0
    rec = []

    def outputs(xv, cur):
        v = voltage(xv, cur) if voltage is not None else np.nan
        tl = temp(xv) if temp is not None else np.nan
        return v, tl

    prev = None
    stop = None
    for n_steps, rate in zip(seg_steps, seg_rates):
        cur = -rate * c_o
        for _ in range(int(n_steps)):
            if not np.all(np.isfinite(x)):
                raise IntegrationError(f"non-finite state at t = {t:.2f} s")
            v, tl = outputs(x, cur)
            if int(round(t / step)) % record_every == 0:
                rec.append((t, x.copy(), v, tl))
            if check and v < limits.Vmin:
                stop = (StopReason.VOLTAGE_CUTOFF, t, x.copy(), v, tl)
                break
            if check and tl >= limits.Tmax:
                stop = (StopReason.TEMPERATURE_CUTOFF, t, x.copy(), v, tl)
                break
            prev = (t, x.copy(), v, tl)
            k1 = deriv(x, cur, t_amb)
            k2 = deriv(x + 0.5 * step * k1, cur, t_amb)
            k3 = deriv(x + 0.5 * step * k2, cur, t_amb)
            k4 = deriv(x + step * k3, cur, t_amb)
            x = x + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += step
        if stop is not None:
            break

    if stop is None:
        cur = -seg_rates[-1] * c_o
        v, tl = outputs(x, cur)
        rec.append((t, x.copy(), v, tl))
        return _build_trajectory(rec, StopReason.HORIZON_REACHED, t)

    reason, t_stop, x_stop, v_stop, tl_stop = stop
    if prev is None or t_stop == 0.0:
        return _build_trajectory([(0.0, x_stop, v_stop, tl_stop)], reason, 0.0)
    t_prev, x_prev, v_prev, tl_prev = prev
    if reason is StopReason.VOLTAGE_CUTOFF:
        frac = (v_prev - limits.Vmin) / (v_prev - v_stop)
    else:
        frac = (limits.Tmax - tl_prev) / (tl_stop - tl_prev)
    frac = min(1.0, max(0.0, frac))
    t_ref = t_prev + frac * (t_stop - t_prev)
    sample = (
        t_ref,
        x_prev + frac * (x_stop - x_prev),
        v_prev + frac * (v_stop - v_prev),
        tl_prev + frac * (tl_stop - tl_prev),
    )
    rec = [r for r in rec if r[0] < t_ref]
    rec.append(sample)
    return _build_trajectory(rec, reason, t_ref)


def _build_trajectory(rec, reason, stop_time) -> Trajectory:
    times = np.array([r[0] for r in rec])
    states = np.vstack([r[1] for r in rec])
    volts = np.array([r[2] for r in rec])
    temps = np.array([r[3] for r in rec])
    return Trajectory(times, states, volts, temps, reason, float(stop_time))
