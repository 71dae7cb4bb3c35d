"""Cell parameters, state, and the two linear physics sub-models.

The electrical side is a double-capacitor equivalent circuit: a bulk/surface
capacitor pair coupled through a diffusion resistance, an OCV source driven
by the surface charge state, an ohmic resistance, and one RC polarization
pair.  The thermal side is a two-node (core/surface) RC network driven by
Joule heat at the core and the ambient temperature.  Both sub-models are
linear in the state, so the combined 5-state dynamics admit a closed-form
solution (see ``propagator``).

Sign convention: the internal current ``I`` is negative for discharge.  All
rate-facing interfaces use a positive C-rate ``z`` with ``I = -z * c_o``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "CellModelError",
    "OcvDomainError",
    "ElectricalParams",
    "ThermalParams",
    "OcvCurve",
    "CellState",
    "OperatingLimits",
    "CellParams",
    "ndc_matrices",
    "thermal_matrices",
    "terminal_voltage_ndc",
    "f_phy",
    "soc",
    "equilibrium_state",
    "nca_like_params",
    "lfp_like_params",
]


class CellModelError(ValueError):
    """Invalid cell parameters or states."""


class OcvDomainError(CellModelError):
    """Charge state outside the OCV curve domain with clamping disabled."""


def _require_positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise CellModelError(f"{name} must be a finite positive number, got {value!r}")
    return value


@dataclass(frozen=True)
class ElectricalParams:
    """Constants of the double-capacitor circuit.

    ``Cb``/``Cs`` are the bulk/surface charge-state capacitances (the pair is
    sized so that ``Cb + Cs = 3600 * c_o``, making the weighted mean of
    ``Vb, Vs`` a faithful state-of-charge scale), ``Rb`` the diffusion
    resistance, ``R0`` the ohmic resistance, ``R1``/``C1`` the polarization
    pair, and ``c_o`` the current magnitude of 1 C in ampere.
    """

    Cb: float
    Cs: float
    Rb: float
    R0: float
    R1: float
    C1: float
    c_o: float

    def __post_init__(self) -> None:
        for name in ("Cb", "Cs", "Rb", "R0", "R1", "C1", "c_o"):
            _require_positive(name, getattr(self, name))
        # Distinct-eigenvalue requirement of the closed-form propagator.
        lam_diff = -(self.Cb + self.Cs) / (self.Cb * self.Cs * self.Rb)
        lam_rc = -1.0 / (self.R1 * self.C1)
        gap = abs(lam_diff - lam_rc) / max(abs(lam_diff), abs(lam_rc))
        if gap < 1e-9:
            raise CellModelError(
                "degenerate spectrum: diffusion and polarization eigenvalues "
                f"coincide ({lam_diff:.6e} vs {lam_rc:.6e})"
            )

    @property
    def diffusion_time_constant(self) -> float:
        return self.Cb * self.Cs * self.Rb / (self.Cb + self.Cs)


@dataclass(frozen=True)
class ThermalParams:
    """Constants of the two-node core/surface thermal network (J/K, K/W)."""

    C_core: float
    C_surf: float
    R_core: float
    R_surf: float

    def __post_init__(self) -> None:
        for name in ("C_core", "C_surf", "R_core", "R_surf"):
            _require_positive(name, getattr(self, name))
        # The 2x2 system matrix of a passive two-node RC network always has
        # real, negative, distinct eigenvalues; verify anyway at construction.
        a = self.matrix()
        eig = np.linalg.eigvals(a)
        if np.iscomplexobj(eig) and np.any(np.abs(eig.imag) > 0):
            raise CellModelError("thermal eigenvalues must be real")
        eig = np.sort(np.real(eig))
        if eig[1] >= 0.0 or abs(eig[0] - eig[1]) / abs(eig[0]) < 1e-12:
            raise CellModelError("thermal eigenvalues must be negative and distinct")

    def matrix(self) -> np.ndarray:
        """System matrix acting on [Tcore, Tsurf]."""
        return np.array(
            [
                [-1.0 / (self.R_core * self.C_core), 1.0 / (self.R_core * self.C_core)],
                [
                    1.0 / (self.R_core * self.C_surf),
                    -1.0 / (self.R_surf * self.C_surf) - 1.0 / (self.R_core * self.C_surf),
                ],
            ]
        )


class OcvCurve:
    """Monotone open-circuit-voltage curve over normalized charge state.

    Breakpoints are interpolated with a monotone piecewise cubic (PCHIP), so
    the curve is continuously differentiable and strictly increasing on the
    breakpoint range.  Evaluation outside [u_min, u_max] either raises
    ``OcvDomainError`` or, with ``clamp=True``, extends linearly using the
    end-point slopes (solvers may transiently leave [0, 1]).
    """

    def __init__(self, u: np.ndarray, voltage: np.ndarray):
        u = np.asarray(u, dtype=float)
        voltage = np.asarray(voltage, dtype=float)
        if u.ndim != 1 or u.shape != voltage.shape or u.size < 4:
            raise CellModelError("OCV curve needs >= 4 (u, voltage) breakpoints")
        if np.any(np.diff(u) <= 0) or np.any(np.diff(voltage) <= 0):
            raise CellModelError("OCV breakpoints must be strictly increasing in u and voltage")
        self.u = u
        self.voltage = voltage
        self._pchip = PchipInterpolator(u, voltage, extrapolate=False)
        self._deriv = self._pchip.derivative()
        self._slope_lo = float(self._deriv(u[0]))
        self._slope_hi = float(self._deriv(u[-1]))

    @property
    def u_min(self) -> float:
        return float(self.u[0])

    @property
    def u_max(self) -> float:
        return float(self.u[-1])

    @property
    def v_min(self) -> float:
        return float(self.voltage[0])

    @property
    def v_max(self) -> float:
        return float(self.voltage[-1])

    def __call__(self, u, clamp: bool = False):
        u_arr = np.asarray(u, dtype=float)
        below = u_arr < self.u_min
        above = u_arr > self.u_max
        if not clamp and (np.any(below) or np.any(above)):
            raise OcvDomainError(
                f"charge state outside OCV domain [{self.u_min}, {self.u_max}]"
            )
        inside = np.clip(u_arr, self.u_min, self.u_max)
        out = self._pchip(inside)
        if np.any(below):
            out = np.where(below, self.v_min + self._slope_lo * (u_arr - self.u_min), out)
        if np.any(above):
            out = np.where(above, self.v_max + self._slope_hi * (u_arr - self.u_max), out)
        return float(out) if np.isscalar(u) or np.ndim(u) == 0 else out

    def derivative(self, u):
        u_arr = np.clip(np.asarray(u, dtype=float), self.u_min, self.u_max)
        out = self._deriv(u_arr)
        return float(out) if np.isscalar(u) or np.ndim(u) == 0 else out

    def inverse(self, v: float) -> float:
        """Charge state at a given OCV (bisection on the monotone curve)."""
        if not (self.v_min <= v <= self.v_max):
            raise OcvDomainError(f"voltage {v} outside OCV range [{self.v_min}, {self.v_max}]")
        lo, hi = self.u_min, self.u_max
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if float(self._pchip(mid)) < v:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def coefficient_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Breakpoints and cubic coefficients for jit-compatible evaluation.

        Returns ``(x, c)`` with ``c`` of shape (4, len(x) - 1); the value on
        interval ``i`` is the cubic ``c[0,i]*dx**3 + ... + c[3,i]`` with
        ``dx = u - x[i]``.
        """
        return self._pchip.x.copy(), self._pchip.c.copy()


@dataclass(frozen=True)
class CellState:
    """Hybrid model state: charge states, polarization voltage, temperatures.

    ``Vb``/``Vs`` live on a nominal [0, 1] charge-state scale but are not
    hard-bounded (the dynamics may transiently exceed the interval).
    """

    Vb: float
    Vs: float
    V1: float
    Tcore: float
    Tsurf: float

    def __post_init__(self) -> None:
        for name in ("Vb", "Vs", "V1", "Tcore", "Tsurf"):
            if not np.isfinite(getattr(self, name)):
                raise CellModelError(f"CellState.{name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.Vb, self.Vs, self.V1, self.Tcore, self.Tsurf])

    @staticmethod
    def from_array(x: np.ndarray) -> "CellState":
        return CellState(float(x[0]), float(x[1]), float(x[2]), float(x[3]), float(x[4]))


@dataclass(frozen=True)
class OperatingLimits:
    """Cut-off voltage and temperature limits plus ambient temperature.

    ``Tmax = inf`` disables the temperature limit (voltage-only runs).
    """

    Vmin: float
    Tmax: float
    Tamb: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.Vmin) or not np.isfinite(self.Tamb) or np.isnan(self.Tmax):
            raise CellModelError("operating limits must be finite")
        if self.Tmax <= self.Tamb:
            raise CellModelError(f"Tmax ({self.Tmax}) must exceed Tamb ({self.Tamb})")


@dataclass(frozen=True)
class CellParams:
    """Full parameter bundle for one cell."""

    electrical: ElectricalParams
    thermal: ThermalParams
    ocv: OcvCurve
    limits: OperatingLimits
    name: str = "cell"

    def __post_init__(self) -> None:
        if not (self.ocv.v_min <= self.limits.Vmin <= self.ocv.v_max):
            raise CellModelError(
                f"Vmin {self.limits.Vmin} outside OCV range "
                f"[{self.ocv.v_min}, {self.ocv.v_max}]"
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ElectricalParams": {
                k: getattr(self.electrical, k) for k in ("Cb", "Cs", "Rb", "R0", "R1", "C1", "c_o")
            },
            "ThermalParams": {
                k: getattr(self.thermal, k) for k in ("C_core", "C_surf", "R_core", "R_surf")
            },
            "OcvCurve": {
                "u": self.ocv.u.tolist(),
                "voltage": self.ocv.voltage.tolist(),
            },
            "OperatingLimits": {k: getattr(self.limits, k) for k in ("Vmin", "Tmax", "Tamb")},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @staticmethod
    def from_dict(doc: dict) -> "CellParams":
        try:
            elec = ElectricalParams(**doc["ElectricalParams"])
            therm = ThermalParams(**doc["ThermalParams"])
            ocv = OcvCurve(np.array(doc["OcvCurve"]["u"]), np.array(doc["OcvCurve"]["voltage"]))
            limits = OperatingLimits(**doc["OperatingLimits"])
        except KeyError as exc:
            raise CellModelError(f"cell parameter document missing field {exc}") from exc
        return CellParams(elec, therm, ocv, limits, name=doc.get("name", "cell"))

    @staticmethod
    def load(path: str | Path) -> "CellParams":
        return CellParams.from_dict(json.loads(Path(path).read_text()))


def ndc_matrices(p: ElectricalParams) -> tuple[np.ndarray, np.ndarray]:
    """System matrix and input vector of the electrical sub-model.

    The first two rows describe charge exchange between the bulk and surface
    capacitors (their row sums vanish: total charge only changes through the
    input current), the third the polarization RC pair.
    """
    a = np.array(
        [
            [-1.0 / (p.Cb * p.Rb), 1.0 / (p.Cb * p.Rb), 0.0],
            [1.0 / (p.Cs * p.Rb), -1.0 / (p.Cs * p.Rb), 0.0],
            [0.0, 0.0, -1.0 / (p.R1 * p.C1)],
        ]
    )
    b = np.array([0.0, 1.0 / p.Cs, 1.0 / p.C1])
    return a, b


def thermal_matrices(p: ThermalParams, R0: float) -> tuple[np.ndarray, np.ndarray]:
    """System and input matrices of the thermal sub-model.

    The input vector convention is ``[I**2, Tamb]``: Joule heat ``R0 * I**2``
    enters at the core, the ambient couples through the surface convection.
    """
    _require_positive("R0", R0)
    a = p.matrix()
    b = np.array(
        [
            [R0 / p.C_core, 0.0],
            [0.0, 1.0 / (p.R_surf * p.C_surf)],
        ]
    )
    return a, b


def terminal_voltage_ndc(
    s: CellState,
    current: float,
    p: ElectricalParams,
    ocv: OcvCurve,
    clamp: bool = False,
) -> float:
    """Terminal voltage of the electrical sub-model: OCV + polarization + IR.

    ``current`` is signed (negative for discharge), so discharging lowers the
    terminal voltage.  ``clamp=True`` evaluates the OCV with linear end
    extension when ``Vs`` leaves the curve domain instead of raising.
    """
    return float(ocv(s.Vs, clamp=clamp)) + s.V1 + p.R0 * current


def f_phy(
    s: CellState,
    current: float,
    t_amb: float,
    electrical: ElectricalParams,
    thermal: ThermalParams,
) -> np.ndarray:
    """State derivative of the combined linear dynamics (5-vector).

    Linear in the state and in the input tuple ``(I, I**2, Tamb)``.
    """
    a_e, b_e = ndc_matrices(electrical)
    a_t, b_t = thermal_matrices(thermal, electrical.R0)
    x = s.as_array()
    dx = np.empty(5)
    dx[:3] = a_e @ x[:3] + b_e * current
    dx[3:] = a_t @ x[3:] + b_t @ np.array([current * current, t_amb])
    return dx


def soc(s: CellState, p: ElectricalParams) -> float:
    """State of charge: capacitor-weighted mean of the charge states.

    ``Cb*Vb + Cs*Vs`` is the conserved charge proxy of the electrical model
    (its derivative equals the input current), normalized and clamped to
    [0, 1].
    """
    value = (p.Cb * s.Vb + p.Cs * s.Vs) / (p.Cb + p.Cs)
    return float(min(1.0, max(0.0, value)))


def equilibrium_state(u: float, t_amb: float) -> CellState:
    """Rested state at charge level ``u``: no gradients, ambient temperature."""
    return CellState(Vb=u, Vs=u, V1=0.0, Tcore=t_amb, Tsurf=t_amb)


# ---------------------------------------------------------------------------
# Default virtual-cell parameter sets
# ---------------------------------------------------------------------------

# 21 breakpoints each, strictly increasing.  Shapes are representative of the
# two chemistries: a steadily rising curve for the NCA-like cell and a wide
# flat plateau for the LFP-like cell.
_NCA_OCV_V = np.array(
    [
        3.000, 3.300, 3.500, 3.620, 3.644, 3.667, 3.690, 3.714, 3.738, 3.761,
        3.785, 3.808, 3.832, 3.856, 3.879, 3.903, 3.926, 3.950, 4.010, 4.100,
        4.200,
    ]
)

_LFP_OCV_V = np.array(
    [
        2.700, 3.050, 3.200, 3.280, 3.292, 3.300, 3.307, 3.313, 3.318, 3.323,
        3.328, 3.333, 3.338, 3.343, 3.348, 3.354, 3.361, 3.370, 3.385, 3.420,
        3.500,
    ]
)

_OCV_U = np.linspace(0.0, 1.0, 21)


def nca_like_params() -> CellParams:
    """Desk-scale NCA-like cell: 2.5 Ah, 3.0-4.2 V window, 8 C ceiling.

    Sized so that a 1 C discharge empties the charge-state scale in one hour
    (Cb + Cs = 3600 * c_o) and tuned so that the surface temperature limit
    binds near the top of the 0.2-8 C range while mid-rate discharges stay
    voltage-limited.
    """
    c_o = 2.5
    total_c = 3600.0 * c_o
    return CellParams(
        electrical=ElectricalParams(
            Cb=0.8 * total_c,
            Cs=0.2 * total_c,
            Rb=0.006,
            R0=0.020,
            R1=0.008,
            C1=3750.0,
            c_o=c_o,
        ),
        thermal=ThermalParams(C_core=22.0, C_surf=7.0, R_core=0.8, R_surf=4.4),
        ocv=OcvCurve(_OCV_U, _NCA_OCV_V),
        limits=OperatingLimits(Vmin=3.0, Tmax=50.0, Tamb=25.0),
        name="nca-like",
    )


def lfp_like_params() -> CellParams:
    """Desk-scale LFP-like cell: 2.5 Ah, 2.7-3.5 V window, 15 C ceiling."""
    c_o = 2.5
    total_c = 3600.0 * c_o
    return CellParams(
        electrical=ElectricalParams(
            Cb=0.8 * total_c,
            Cs=0.2 * total_c,
            Rb=0.0032,
            R0=0.006,
            R1=0.0035,
            C1=7150.0,
            c_o=c_o,
        ),
        thermal=ThermalParams(C_core=30.0, C_surf=9.0, R_core=0.8, R_surf=3.8),
        ocv=OcvCurve(_OCV_U, _LFP_OCV_V),
        limits=OperatingLimits(Vmin=2.7, Tmax=45.0, Tamb=25.0),
        name="lfp-like",
    )


def default_params(cell_class: str) -> CellParams:
    if cell_class == "nca-like":
        return nca_like_params()
    if cell_class == "lfp-like":
        return lfp_like_params()
    raise CellModelError(f"unknown cell class {cell_class!r} (use 'nca-like' or 'lfp-like')")
