"""Three-stage remaining-discharge-energy predictor, the forward-simulation
oracle it is judged against, and the state-of-charge-only baseline.

A prediction at state ``x``, rate ``z``, and ambient temperature runs three
steps: a network predicts the time to the voltage cutoff; evenly spaced
checkpoints on that horizon detect a temperature-limit crossing, refined by
bisection on the closed-form temperature evaluation when one exists; a
second network then maps the resulting remaining discharge time to energy.
The oracle instead steps the hybrid model densely to the first limit and
integrates the discharge power, which is exact but far slower; the speed gap
between the two is the point of the design.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .cell import CellState, ElectricalParams, OcvCurve, OperatingLimits, soc
from .hybrid import HybridCellModel
from .neural import Mlp, mlp_forward, mlp_load_file, mlp_save_file

__all__ = [
    "BracketError",
    "BisectionError",
    "Limiting",
    "RdeResult",
    "RdePredictor",
    "predict_rdt_vmin",
    "checkpoint_scan",
    "bisection_tmax",
    "predict_energy",
    "predict_rde",
    "predict_rde_sweep",
    "oracle_rde",
    "traditional_rde",
    "relative_error",
]


class BracketError(ValueError):
    """Bisection bracket does not enclose a temperature-limit crossing."""


class BisectionError(RuntimeError):
    """Bisection failed to converge within the iteration cap."""


class Limiting(enum.Enum):
    VOLTAGE = "voltage"
    TEMPERATURE = "temperature"


@dataclass(frozen=True)
class RdeResult:
    """Remaining discharge time and energy with the binding limit."""

    rdt: float
    energy: float
    limiting: Limiting
    rdt_vmin: float
    rdt_tmax: float | None
    bisect_iters: int
    extrapolated: bool = False

    def __post_init__(self) -> None:
        if self.rdt_tmax is not None:
            expected = min(self.rdt_vmin, self.rdt_tmax)
        else:
            expected = self.rdt_vmin
        if abs(self.rdt - expected) > 1e-9 * max(1.0, expected):
            raise ValueError("rdt must equal the minimum of its two cutoff times")
        if self.energy < 0:
            raise ValueError("energy must be nonnegative")


@dataclass
class RdePredictor:
    """Bundle of the two prediction networks, the hybrid model, and limits.

    ``rdt_net`` maps (Vb, Vs, V1, Tcore, Tsurf, z, Tamb) to seconds;
    ``energy_net`` adds the horizon input and maps to watt-hours.  ``m`` is
    the checkpoint count of the temperature scan, ``eps`` the bisection
    temperature tolerance, ``z_range`` the trained rate envelope.
    """

    rdt_net: Mlp
    energy_net: Mlp
    model: HybridCellModel
    limits: OperatingLimits
    m: int = 20
    eps: float = 0.01
    max_bisect: int = 60
    z_range: tuple[float, float] = (0.2, 8.0)

    def __post_init__(self) -> None:
        if self.rdt_net.input_width != 7 or self.rdt_net.output_width != 1:
            raise ValueError("rdt network must map 7 inputs to 1 output")
        if self.energy_net.input_width != 8 or self.energy_net.output_width != 1:
            raise ValueError("energy network must map 8 inputs to 1 output")
        if self.m < 2:
            raise ValueError("checkpoint count m must be >= 2")
        if self.eps <= 0:
            raise ValueError("bisection tolerance must be positive")

    def in_envelope(self, z: float) -> bool:
        lo, hi = self.z_range
        return lo <= z <= hi

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        self.model.save(directory)
        mlp_save_file(self.rdt_net, directory / "rdt_net.json")
        mlp_save_file(self.energy_net, directory / "energy_net.json")
        doc = {
            "m": self.m,
            "eps": self.eps,
            "max_bisect": self.max_bisect,
            "z_range": list(self.z_range),
            "limits": {k: getattr(self.limits, k) for k in ("Vmin", "Tmax", "Tamb")},
        }
        (directory / "predictor.json").write_text(json.dumps(doc, indent=2) + "\n")

    @staticmethod
    def load(directory: str | Path) -> "RdePredictor":
        directory = Path(directory)
        model = HybridCellModel.load(directory)
        doc = json.loads((directory / "predictor.json").read_text())
        return RdePredictor(
            rdt_net=mlp_load_file(directory / "rdt_net.json"),
            energy_net=mlp_load_file(directory / "energy_net.json"),
            model=model,
            limits=OperatingLimits(**doc["limits"]),
            m=int(doc["m"]),
            eps=float(doc["eps"]),
            max_bisect=int(doc["max_bisect"]),
            z_range=tuple(doc["z_range"]),
        )


def predict_rdt_vmin(p: RdePredictor, s: CellState, z: float, t_amb: float) -> float:
    """Network estimate of the time to the voltage cutoff, clamped at zero."""
    x = np.concatenate([s.as_array(), [z, t_amb]])
    return max(0.0, float(mlp_forward(p.rdt_net, x)[0]))


def predict_energy(p: RdePredictor, s: CellState, z: float, t_amb: float, dt: float) -> float:
    """Network estimate of the energy released over ``dt``, clamped at zero."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    x = np.concatenate([s.as_array(), [z, t_amb, dt]])
    return max(0.0, float(mlp_forward(p.energy_net, x)[0]))


def checkpoint_scan(
    p: RdePredictor, s: CellState, z: float, t_amb: float, rdt_vmin: float
) -> tuple[float, float] | None:
    """Detect a temperature-limit crossing on evenly spaced checkpoints.

    Evaluates the temperature head at ``i * rdt_vmin / m`` for i = 1..m.
    Returns ``None`` when every checkpoint stays below ``Tmax``; otherwise
    the bracketing interval around the first exceedance (lower end 0 for the
    first checkpoint), which by construction contains a sign change.
    """
    if rdt_vmin <= 0:
        raise ValueError("checkpoint scan needs rdt_vmin > 0")
    dts = rdt_vmin * np.arange(1, p.m + 1) / p.m
    temps = p.model.ht_phi_grid(s, z, t_amb, dts)
    exceed = np.nonzero(temps >= p.limits.Tmax)[0]
    if exceed.size == 0:
        return None
    i_star = int(exceed[0])
    lower = 0.0 if i_star == 0 else float(dts[i_star - 1])
    return lower, float(dts[i_star])


def bisection_tmax(
    p: RdePredictor, s: CellState, z: float, t_amb: float, bracket: tuple[float, float]
) -> tuple[float, int]:
    """Bisect the bracketed temperature crossing to within ``eps`` degrees.

    Precondition (single crossing): temperature below ``Tmax`` at the lower
    end and at or above it at the upper end.  Returns the crossing time and
    the iteration count; raises ``BisectionError`` with the final residual if
    the cap is reached.
    """
    lo, hi = bracket
    tmax = p.limits.Tmax
    if not (lo < hi):
        raise BracketError(f"empty bracket [{lo}, {hi}]")
    t_lo = p.model.ht_phi(s, z, t_amb, lo)
    t_hi = p.model.ht_phi(s, z, t_amb, hi)
    if not (t_lo < tmax <= t_hi):
        raise BracketError(
            f"bracket [{lo:.3f}, {hi:.3f}] s does not enclose the limit: "
            f"T = [{t_lo:.4f}, {t_hi:.4f}] degC vs Tmax = {tmax}"
        )
    tau = 0.5 * (lo + hi)
    for iteration in range(1, p.max_bisect + 1):
        tau = 0.5 * (lo + hi)
        t_mid = p.model.ht_phi(s, z, t_amb, tau)
        if abs(t_mid - tmax) < p.eps:
            return tau, iteration
        if t_mid < tmax:
            lo = tau
        else:
            hi = tau
    residual = abs(p.model.ht_phi(s, z, t_amb, tau) - tmax)
    raise BisectionError(
        f"no convergence in {p.max_bisect} iterations; final residual {residual:.4g} degC"
    )


def predict_rde(p: RdePredictor, s: CellState, z: float, t_amb: float) -> RdeResult:
    """Full three-step prediction at one state and rate."""
    extrapolated = not p.in_envelope(z)
    tmax = p.limits.Tmax
    if s.Tcore >= tmax or p.model.temperature(s) >= tmax:
        return RdeResult(0.0, 0.0, Limiting.TEMPERATURE, 0.0, 0.0, 0, extrapolated)

    rdt_vmin = predict_rdt_vmin(p, s, z, t_amb)
    if rdt_vmin == 0.0:
        return RdeResult(0.0, 0.0, Limiting.VOLTAGE, 0.0, None, 0, extrapolated)

    bracket = checkpoint_scan(p, s, z, t_amb, rdt_vmin)
    rdt_tmax = None
    iters = 0
    if bracket is not None:
        rdt_tmax, iters = bisection_tmax(p, s, z, t_amb, bracket)
    if rdt_tmax is not None and rdt_tmax < rdt_vmin:
        rdt = rdt_tmax
        limiting = Limiting.TEMPERATURE
    else:
        rdt = rdt_vmin
        limiting = Limiting.VOLTAGE
    energy = predict_energy(p, s, z, t_amb, rdt)
    return RdeResult(rdt, energy, limiting, rdt_vmin, rdt_tmax, iters, extrapolated)


def predict_rde_sweep(
    p: RdePredictor, s: CellState, z_grid: np.ndarray, t_amb: float
) -> list[RdeResult]:
    """Predictions across a rate grid from one state (the fast path)."""
    return [predict_rde(p, s, float(z), t_amb) for z in np.asarray(z_grid, dtype=float)]


def _refine_crossing(eval_fn, target: float, k: int, grid: float, tol: float, falling: bool) -> float:
    """Bisect the grid interval ((k-1)*grid, k*grid] to a time tolerance."""
    if k == 0:
        return 0.0
    lo, hi = (k - 1) * grid, k * grid
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        value = eval_fn(mid)
        above = value >= target if falling else value < target
        if above:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def oracle_rde(
    model: HybridCellModel,
    s: CellState,
    z: float,
    t_amb: float,
    limits: OperatingLimits,
    grid: float = 1.0,
    refine_tol: float = 0.01,
) -> RdeResult:
    """Ground-truth prediction by dense forward stepping of the hybrid model.

    Steps the closed-form state on a fixed grid while evaluating both heads,
    refines both limit crossings by bisection to ``refine_tol`` seconds, and
    integrates the discharge power trapezoidally up to the earlier limit.
    This is the standard the network predictor is judged against, and the
    deliberately slow path of the speed benchmark.
    """
    if z <= 0:
        raise ValueError("oracle requires z > 0")
    v, temps, k_v, k_t = model.dense_scan(s, z, t_amb, limits.Vmin, limits.Tmax, grid=grid)

    rdt_vmin = _refine_crossing(
        lambda dt: model.hv_phi(s, z, t_amb, dt), limits.Vmin, k_v, grid, refine_tol, falling=True
    )
    rdt_tmax = None
    if k_t >= 0:
        rdt_tmax = _refine_crossing(
            lambda dt: model.ht_phi(s, z, t_amb, dt),
            limits.Tmax,
            k_t,
            grid,
            refine_tol,
            falling=False,
        )
    if rdt_tmax is not None and rdt_tmax < rdt_vmin:
        rdt = rdt_tmax
        limiting = Limiting.TEMPERATURE
    else:
        rdt = rdt_vmin
        limiting = Limiting.VOLTAGE

    k_last = min(int(rdt // grid), v.shape[0] - 1)
    cum = 0.0
    if k_last > 0:
        cum = float(np.sum(0.5 * (v[:k_last] + v[1:k_last + 1])) * grid)
    v_end = model.hv_phi(s, z, t_amb, rdt)
    cum += 0.5 * (v[k_last] + v_end) * (rdt - k_last * grid)
    energy = max(0.0, z * model.cache.c_o * cum / 3600.0)
    return RdeResult(rdt, energy, limiting, rdt_vmin, rdt_tmax, 0)


def traditional_rde(s: CellState, p: ElectricalParams, ocv: OcvCurve, qa: float) -> float:
    """State-of-charge-only baseline: rated capacity times the OCV integral.

    ``qa`` is the charge capacity in ampere-hours; the integral runs over the
    state-of-charge interval [0, soc(s)] by adaptive quadrature.  Blind to
    rate effects and to both operating limits.
    """
    if qa <= 0:
        raise ValueError("charge capacity must be positive")
    upper = soc(s, p)
    if upper == 0.0:
        return 0.0
    value, abserr = quad(lambda u: ocv(u, clamp=True), 0.0, upper, epsabs=1e-9, limit=200)
    if abserr > 1e-6:
        raise RuntimeError(f"quadrature error {abserr:.2e} above 1e-6 Wh tolerance")
    return qa * value


def relative_error(truth: float, pred: float) -> float:
    """Percent relative error ``|truth - pred| / |truth| * 100``."""
    if truth == 0:
        raise ZeroDivisionError("relative error undefined for zero truth")
    return abs(truth - pred) / abs(truth) * 100.0


# Sample-weight floors for the relative-error training losses: targets below
# these scales stop gaining weight, keeping the near-empty tail from
# dominating the loss and starving the rest of the range.
RDT_WEIGHT_FLOOR_S = 60.0
ENERGY_WEIGHT_FLOOR_WH = 0.5


def fit_rdt_net(rdt_dataset, cfg) -> Mlp:
    """Train the time-to-cutoff network on branch-out samples.

    Samples are weighted by the inverse square of the (floored) target, so
    the optimum equalizes relative rather than absolute errors across the
    wide span of cutoff times.
    """
    from .hybrid import train_output_head

    weights = 1.0 / np.maximum(rdt_dataset.rdt, RDT_WEIGHT_FLOOR_S) ** 2
    net, _ = train_output_head(rdt_dataset.inputs(), rdt_dataset.rdt, cfg, sample_weights=weights)
    return net


def fit_energy_net(energy_dataset, cfg, max_samples: int | None = None) -> Mlp:
    """Train the released-energy network on branch-out samples.

    Rows are weighted by the inverse square of their episode's (floored)
    final energy, matching the per-episode relative accuracy target; the
    horizon-zero rows then anchor the curve at zero without dominating.
    """
    from .hybrid import train_output_head

    ds = energy_dataset
    ds.ensure_episode_finals()
    if max_samples is not None:
        ds = ds.decimate(max_samples, seed=cfg.seed)
    weights = 1.0 / np.maximum(ds.episode_final_energy, ENERGY_WEIGHT_FLOOR_WH) ** 2
    net, _ = train_output_head(ds.inputs(), ds.energy, cfg, sample_weights=weights)
    return net
