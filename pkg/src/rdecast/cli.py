"""Command-line front end: pipeline stages, prediction, validation, benchmark.

The pipeline runs in four resumable stages, each writing its artifacts plus a
manifest (config hash, input/output file hashes, metrics).  A stage whose
manifest still matches its inputs is skipped on rerun, so deleting an
intermediate regenerates only the downstream stages.  Everything is
deterministic for a fixed config and seed; reruns reproduce the datasets,
weights, and result tables byte for byte (manifests carry wall-clock fields
and are excluded from that guarantee).

Exit codes: 0 success, 2 config error, 3 stage-input error, 4 numerical or
training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .cell import CellParams, CellState, OperatingLimits, default_params, equilibrium_state
from .datagen import (
    BranchOutResult,
    CurrentProfile,
    EnergyDataset,
    RdtDataset,
    branch_out_generate,
    evtol_profile,
    load_profile,
    save_profile,
    synth_drive_cycle,
)
from .hybrid import (
    DEFAULT_RESIDUALS,
    HybridCellModel,
    VirtualCell,
    generate_training_pairs,
    train_hybrid_model,
)
from .neural import TrainConfig, TrainingError
from .propagator import SimulationError
from .rde import (
    Limiting,
    RdePredictor,
    RdeResult,
    fit_energy_net,
    fit_rdt_net,
    oracle_rde,
    predict_rde,
    predict_rde_sweep,
    relative_error,
    traditional_rde,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE_INPUT = 3
EXIT_NUMERIC = 4

RESULT_COLUMNS = ["t_s", "z", "rdt_s", "energy_wh", "limiting", "rdt_vmin_s", "rdt_tmax_s", "bisect_iters"]


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


class StageInputError(RuntimeError):
    """A required stage input is missing or stale."""


def _fmt(x) -> str:
    """Numeric CSV formatting: 9 significant digits, '.' decimal separator."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_CLASS_DEFAULTS = {
    "nca-like": {
        "limits": {"Vmin": 3.0, "Tmax": 50.0, "Tamb": 25.0},
        "z_max": 8.0,
        "cc_rates": [0.5, 1.0, 3.0, 5.0, 8.0],
    },
    "lfp-like": {
        "limits": {"Vmin": 2.7, "Tmax": 45.0, "Tamb": 25.0},
        "z_max": 15.0,
        "cc_rates": [0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 15.0],
    },
}


@dataclass
class TruthPlan:
    cc_rates: list[float]
    n_train_cycles: int = 4
    n_test_cycles: int = 2
    cycle_duration_s: float = 2400.0
    cycle_seed_base: int = 1000
    sim_step_s: float = 0.01


@dataclass
class RdePlan:
    t_stride_s: float = 1.0
    z_min: float = 0.2
    z_max: float = 8.0
    z_points: int = 20
    rows_per_episode: int = 100
    rdt_tol_s: float = 0.1

    def z_grid(self) -> np.ndarray:
        return np.geomspace(self.z_min, self.z_max, self.z_points)


@dataclass
class PredictorPlan:
    m: int = 20
    eps_degc: float = 0.01
    max_bisect: int = 60


@dataclass
class ValidationPlan:
    points_per_profile: int = 8
    include_evtol: bool = True
    # Fractions of the parent discharge duration and of the top rate, paired
    # in order: high rates early in the discharge, low rates late, mirroring
    # how such sweeps are exercised in practice.
    time_fractions: tuple = (0.12, 0.22, 0.35, 0.50, 0.62, 0.75, 0.85, 0.92)
    rate_fractions_a: tuple = (1.0, 0.75, 0.5, 0.3125, 0.1875, 0.125, 0.0625, 0.03125)
    rate_fractions_b: tuple = (0.875, 0.625, 0.4375, 0.25, 0.15, 0.1, 0.05, 0.03125)
    evtol_times_s: tuple = (50.0, 300.0, 700.0, 900.0)
    evtol_rate_fractions: tuple = (1.0, 0.625, 0.375, 0.125)


@dataclass
class RunConfig:
    cell_class: str = "nca-like"
    seed: int = 20240801
    limits: OperatingLimits | None = None
    residuals: dict = field(default_factory=dict)
    truth_plan: TruthPlan | None = None
    rde_plan: RdePlan | None = None
    predictor: PredictorPlan = field(default_factory=PredictorPlan)
    validation: ValidationPlan = field(default_factory=ValidationPlan)
    training: dict = field(default_factory=dict)
    energy_max_samples: int = 600_000

    def __post_init__(self) -> None:
        if self.cell_class not in _CLASS_DEFAULTS:
            raise ConfigError(f"unknown cell_class {self.cell_class!r}")
        defaults = _CLASS_DEFAULTS[self.cell_class]
        if self.limits is None:
            self.limits = OperatingLimits(**defaults["limits"])
        if self.truth_plan is None:
            self.truth_plan = TruthPlan(cc_rates=list(defaults["cc_rates"]))
        if self.rde_plan is None:
            self.rde_plan = RdePlan(z_max=defaults["z_max"])
        base = dict(DEFAULT_RESIDUALS[self.cell_class])
        base.update(self.residuals)
        self.residuals = base

    def cell_params(self) -> CellParams:
        params = default_params(self.cell_class)
        return CellParams(params.electrical, params.thermal, params.ocv, self.limits, params.name)

    def virtual_cell(self) -> VirtualCell:
        return VirtualCell(self.cell_params(), **self.residuals)

    def train_config(self, network: str) -> TrainConfig:
        """Per-network training settings (config section overrides defaults)."""
        defaults = {
            "voltage_head": dict(learning_rate=2e-3, batch_size=256, epochs=500, patience=40),
            "temp_head": dict(learning_rate=2e-3, batch_size=256, epochs=400, patience=40),
            "rdt_net": dict(learning_rate=2e-3, batch_size=512, epochs=400, patience=30),
            "energy_net": dict(learning_rate=2e-3, batch_size=1024, epochs=160, patience=15),
        }[network]
        seed_offset = {"voltage_head": 1, "temp_head": 2, "rdt_net": 3, "energy_net": 4}[network]
        defaults["seed"] = self.seed + seed_offset
        defaults.update(self.training.get(network, {}))
        return TrainConfig(**defaults)

    def canonical(self) -> dict:
        # The resolved per-network training settings are embedded so that a
        # change of built-in defaults also invalidates stage manifests.
        resolved = {
            name: vars(self.train_config(name))
            for name in ("voltage_head", "temp_head", "rdt_net", "energy_net")
        }
        doc = {
            "cell_class": self.cell_class,
            "seed": self.seed,
            "limits": {k: getattr(self.limits, k) for k in ("Vmin", "Tmax", "Tamb")},
            "residuals": self.residuals,
            "truth_plan": vars(self.truth_plan),
            "rde_plan": vars(self.rde_plan),
            "predictor": vars(self.predictor),
            "validation": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(self.validation).items()
            },
            "training": resolved,
            "energy_max_samples": self.energy_max_samples,
        }
        return doc

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.canonical(), sort_keys=True).encode()
        ).hexdigest()[:16]

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        known = {
            "cell_class",
            "seed",
            "limits",
            "residuals",
            "truth_plan",
            "rde_plan",
            "predictor",
            "validation",
            "training",
            "energy_max_samples",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(doc)
        try:
            if "limits" in kwargs:
                kwargs["limits"] = OperatingLimits(**kwargs["limits"])
            if "truth_plan" in kwargs:
                kwargs["truth_plan"] = TruthPlan(**kwargs["truth_plan"])
            if "rde_plan" in kwargs:
                kwargs["rde_plan"] = RdePlan(**kwargs["rde_plan"])
            if "predictor" in kwargs:
                kwargs["predictor"] = PredictorPlan(**kwargs["predictor"])
            if "validation" in kwargs:
                v = dict(kwargs["validation"])
                for key in (
                    "time_fractions",
                    "rate_fractions_a",
                    "rate_fractions_b",
                    "evtol_times_s",
                    "evtol_rate_fractions",
                ):
                    if key in v:
                        v[key] = tuple(v[key])
                kwargs["validation"] = ValidationPlan(**v)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return RunConfig(**kwargs)

    @staticmethod
    def load(path: str | Path | None, seed: int | None = None, cell_class: str | None = None) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if cell_class is not None:
            doc["cell_class"] = cell_class
        cfg = RunConfig.from_dict(doc)
        if seed is not None:
            cfg.seed = seed
        return cfg


# ---------------------------------------------------------------------------
# Profiles of the default plan
# ---------------------------------------------------------------------------


def _cc_profile(rate: float) -> CurrentProfile:
    # Generous horizon: the voltage cutoff ends the run well before it.
    duration = float(int(1.3 * 3600.0 / rate) + 60)
    return CurrentProfile(((duration, rate),))


def profile_paths(out: Path, cfg: RunConfig) -> dict[str, Path]:
    pdir = out / "profiles"
    paths = {}
    for rate in cfg.truth_plan.cc_rates:
        paths[f"cc_{rate:g}"] = pdir / f"cc_{rate:g}.csv"
    for i in range(cfg.truth_plan.n_train_cycles):
        paths[f"train_cycle_{i}"] = pdir / f"train_cycle_{i}.csv"
    for i in range(cfg.truth_plan.n_test_cycles):
        paths[f"test_cycle_{i}"] = pdir / f"test_cycle_{i}.csv"
    paths["evtol"] = pdir / "evtol.csv"
    return paths


def build_profiles(cfg: RunConfig) -> dict[str, CurrentProfile]:
    z_max = cfg.rde_plan.z_max
    plan = cfg.truth_plan
    profiles = {}
    for rate in plan.cc_rates:
        profiles[f"cc_{rate:g}"] = _cc_profile(rate)
    for i in range(plan.n_train_cycles):
        profiles[f"train_cycle_{i}"] = synth_drive_cycle(
            plan.cycle_seed_base + i, plan.cycle_duration_s, z_max
        )
    for i in range(plan.n_test_cycles):
        profiles[f"test_cycle_{i}"] = synth_drive_cycle(
            plan.cycle_seed_base + 100 + i, plan.cycle_duration_s, z_max
        )
    profiles["evtol"] = evtol_profile()
    return profiles


# ---------------------------------------------------------------------------
# Manifests and stage plumbing
# ---------------------------------------------------------------------------


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _hash_map(out: Path, paths: list[Path]) -> dict[str, str]:
    return {str(p.relative_to(out)): file_sha256(p) for p in paths}


def _manifest_current(out: Path, man_path: Path, cfg_hash: str) -> bool:
    if not man_path.exists():
        return False
    try:
        man = json.loads(man_path.read_text())
    except json.JSONDecodeError:
        return False
    if man.get("config_hash") != cfg_hash:
        return False
    for section in ("inputs", "outputs"):
        for rel, digest in man.get(section, {}).items():
            path = out / rel
            if not path.exists() or file_sha256(path) != digest:
                return False
    return True


def run_stage(name: str, out: Path, cfg: RunConfig, inputs: list[Path], force, builder) -> dict:
    """Run one pipeline stage unless its manifest proves it is current."""
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.hash()
    man_path = out / f"{name}.manifest.json"
    if not force and _manifest_current(out, man_path, cfg_hash):
        print(f"[{name}] up to date, skipping")
        return json.loads(man_path.read_text())
    missing = [str(p) for p in inputs if not p.exists()]
    if missing:
        raise StageInputError(f"stage '{name}' missing inputs: {missing}")
    t0 = time.perf_counter()
    outputs, metrics = builder()
    manifest = {
        "stage": name,
        "config_hash": cfg_hash,
        "seed": cfg.seed,
        "inputs": _hash_map(out, inputs),
        "outputs": _hash_map(out, outputs),
        "metrics": metrics,
        "runtime_s": round(time.perf_counter() - t0, 3),
    }
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"[{name}] done in {manifest['runtime_s']} s")
    return manifest


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_gen_truth(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Write profiles, the cell parameter file, and truth datasets."""

    def build():
        cell = cfg.virtual_cell()
        params = cfg.cell_params()
        params.save(out / "cell.json")
        profiles = build_profiles(cfg)
        paths = profile_paths(out, cfg)
        (out / "profiles").mkdir(exist_ok=True)
        for name, profile in profiles.items():
            save_profile(profile, paths[name])

        train_names = [f"cc_{r:g}" for r in cfg.truth_plan.cc_rates] + [
            f"train_cycle_{i}" for i in range(cfg.truth_plan.n_train_cycles)
        ]
        test_names = [f"test_cycle_{i}" for i in range(cfg.truth_plan.n_test_cycles)]
        t_amb = cfg.limits.Tamb
        step = cfg.truth_plan.sim_step_s
        train = generate_training_pairs(cell, [profiles[n] for n in train_names], t_amb, step)
        test = generate_training_pairs(
            cell, [profiles[n] for n in test_names], t_amb, step, profile_id_offset=100
        )
        _write_truth(train, out / "truth_train.csv")
        _write_truth(test, out / "truth_test.csv")
        outputs = [out / "cell.json", out / "truth_train.csv", out / "truth_test.csv"]
        outputs += list(paths.values())
        metrics = {"train_records": len(train), "test_records": len(test)}
        return outputs, metrics

    return run_stage("gen-truth", out, cfg, [], force, build)


TRUTH_COLUMNS = ["profile_id", "t_s", "i_a", "v_true", "tsurf_true", "vb", "vs", "v1", "tcore", "tsurf"]


def _write_truth(data, path: Path) -> None:
    import pandas as pd

    frame = pd.DataFrame(
        np.column_stack(
            [data.profile_ids, data.times, data.currents, data.true_voltage,
             data.true_surface_temp, data.base_states]
        ),
        columns=TRUTH_COLUMNS,
    )
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")


def _read_truth(path: Path):
    import pandas as pd

    from .datagen import DatasetFormatError
    from .hybrid import TruthData

    frame = pd.read_csv(path)
    if list(frame.columns) != TRUTH_COLUMNS:
        raise DatasetFormatError(f"{path}: unexpected columns {list(frame.columns)}")
    arr = frame.to_numpy(dtype=float)
    return TruthData(arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5:10], arr[:, 0].astype(int))


def stage_train_hybrid(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Fit the voltage and temperature heads; report held-out RMSEs."""
    inputs = [out / "cell.json", out / "truth_train.csv", out / "truth_test.csv"]

    def build():
        params = CellParams.load(out / "cell.json")
        train = _read_truth(out / "truth_train.csv")
        test = _read_truth(out / "truth_test.csv")
        model, report = train_hybrid_model(
            params, train, cfg.train_config("voltage_head"), cfg.train_config("temp_head"), holdout=test
        )
        model.save(out / "model")
        outputs = [out / "model" / n for n in ("cell.json", "voltage_head.json", "temp_head.json")]
        return outputs, report

    return run_stage("train-hybrid", out, cfg, inputs, force, build)


def stage_gen_rde_data(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Branch-out episodic datasets from the trained hybrid model."""
    paths = profile_paths(out, cfg)
    cycle_paths = [paths[f"train_cycle_{i}"] for i in range(cfg.truth_plan.n_train_cycles)]
    inputs = [out / "model" / n for n in ("cell.json", "voltage_head.json", "temp_head.json")]
    inputs += cycle_paths

    def build():
        model = HybridCellModel.load(out / "model")
        plan = cfg.rde_plan
        rdt_parts = []
        energy_parts = []
        truncated = 0
        for path in cycle_paths:
            profile = load_profile(path)
            result = branch_out_generate(
                model,
                profile,
                plan.z_grid(),
                plan.t_stride_s,
                cfg.limits.Tamb,
                cfg.limits,
                rows_per_episode=plan.rows_per_episode,
                rdt_tol=plan.rdt_tol_s,
            )
            truncated += int(result.parent_truncated)
            rdt_parts.append(result.rdt)
            energy_parts.append(result.energy)
        rdt_ds = RdtDataset(
            np.vstack([p.states for p in rdt_parts]),
            np.concatenate([p.z for p in rdt_parts]),
            np.concatenate([p.t_amb for p in rdt_parts]),
            np.concatenate([p.rdt for p in rdt_parts]),
        )
        energy_ds = EnergyDataset(
            np.vstack([p.states for p in energy_parts]),
            np.concatenate([p.z for p in energy_parts]),
            np.concatenate([p.t_amb for p in energy_parts]),
            np.concatenate([p.dt for p in energy_parts]),
            np.concatenate([p.energy for p in energy_parts]),
        )
        rdt_ds.save(out / "rdt_data.csv")
        energy_ds.save(out / "energy_data.csv")
        metrics = {
            "rdt_samples": len(rdt_ds),
            "energy_samples": len(energy_ds),
            "parents_truncated": truncated,
        }
        return [out / "rdt_data.csv", out / "energy_data.csv"], metrics

    return run_stage("gen-rde-data", out, cfg, inputs, force, build)


def stage_train_rde(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Fit the time-to-cutoff and energy networks; finalize the bundle."""
    inputs = [out / "rdt_data.csv", out / "energy_data.csv"]
    inputs += [out / "model" / n for n in ("cell.json", "voltage_head.json", "temp_head.json")]

    def build():
        model = HybridCellModel.load(out / "model")
        rdt_ds = RdtDataset.load(out / "rdt_data.csv")
        energy_ds = EnergyDataset.load(out / "energy_data.csv")
        rdt_net = fit_rdt_net(rdt_ds, cfg.train_config("rdt_net"))
        energy_net = fit_energy_net(
            energy_ds, cfg.train_config("energy_net"), max_samples=cfg.energy_max_samples
        )
        predictor = RdePredictor(
            rdt_net=rdt_net,
            energy_net=energy_net,
            model=model,
            limits=cfg.limits,
            m=cfg.predictor.m,
            eps=cfg.predictor.eps_degc,
            max_bisect=cfg.predictor.max_bisect,
            z_range=(cfg.rde_plan.z_min, cfg.rde_plan.z_max),
        )
        predictor.save(out / "model")
        outputs = [out / "model" / n for n in ("rdt_net.json", "energy_net.json", "predictor.json")]
        metrics = {"rdt_samples": len(rdt_ds), "energy_samples_used": min(len(energy_ds), cfg.energy_max_samples)}
        return outputs, metrics

    return run_stage("train-rde", out, cfg, inputs, force, build)


def run_pipeline(cfg: RunConfig, out: Path, force: bool = False) -> None:
    stage_gen_truth(cfg, out, force)
    stage_train_hybrid(cfg, out, force)
    stage_gen_rde_data(cfg, out, force)
    stage_train_rde(cfg, out, force)


# ---------------------------------------------------------------------------
# Prediction-time helpers
# ---------------------------------------------------------------------------


def parent_states(model: HybridCellModel, profile: CurrentProfile, t_amb: float, vmin: float):
    """States along a profile up to (excluding) the hybrid voltage cutoff."""
    s0 = equilibrium_state(1.0, t_amb)
    times, states, currents = model.state_trajectory(profile, s0, t_amb)
    volts = model.voltage_batch(states, currents)
    below = volts < vmin
    end = int(np.argmax(below)) if bool(np.any(below)) else times.shape[0]
    return times[:end], states[:end], currents[:end], volts[:end]


def state_at(model: HybridCellModel, profile: CurrentProfile, t: float, t_amb: float, vmin: float) -> CellState:
    times, states, _, _ = parent_states(model, profile, t_amb, vmin)
    if t < 0 or t > times[-1]:
        raise StageInputError(
            f"t = {t} s outside the profile's pre-cutoff range [0, {times[-1]:.0f}] s"
        )
    idx = int(np.argmin(np.abs(times - t)))
    return CellState.from_array(states[idx])


def result_row(t: float, z: float, r: RdeResult) -> list[str]:
    return [
        _fmt(t),
        _fmt(z),
        _fmt(r.rdt),
        _fmt(r.energy),
        r.limiting.value,
        _fmt(r.rdt_vmin),
        "" if r.rdt_tmax is None else _fmt(r.rdt_tmax),
        str(r.bisect_iters),
    ]


def _write_rows(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _resolve_profile(out: Path, name: str) -> CurrentProfile:
    candidate = out / "profiles" / f"{name}.csv"
    if candidate.exists():
        return load_profile(candidate)
    path = Path(name)
    if path.exists():
        return load_profile(path)
    raise StageInputError(f"profile {name!r} not found (looked for {candidate} and {path})")


def cmd_predict(cfg: RunConfig, out: Path, args) -> None:
    predictor = RdePredictor.load(out / "model")
    profile = _resolve_profile(out, args.profile)
    t_amb = cfg.limits.Tamb
    s = state_at(predictor.model, profile, args.t, t_amb, cfg.limits.Vmin)
    rows = []
    for z in args.z:
        r = predict_rde(predictor, s, z, t_amb)
        rows.append(result_row(args.t, z, r))
    print(",".join(RESULT_COLUMNS))
    for row in rows:
        print(",".join(row))
    if args.save:
        _write_rows(out / "predict.csv", RESULT_COLUMNS, rows)


def cmd_sweep(cfg: RunConfig, out: Path, args) -> Path:
    """Full (time x rate) prediction surface for one profile."""
    predictor = RdePredictor.load(out / "model")
    profile = _resolve_profile(out, args.profile)
    t_amb = cfg.limits.Tamb
    times, states, _, _ = parent_states(predictor.model, profile, t_amb, cfg.limits.Vmin)
    stride = max(1, int(round(args.stride / profile.sample_interval)))
    z_grid = np.geomspace(cfg.rde_plan.z_min, cfg.rde_plan.z_max, args.z_points)
    rows = []
    for idx in range(0, times.shape[0], stride):
        s = CellState.from_array(states[idx])
        for r, z in zip(predict_rde_sweep(predictor, s, z_grid, t_amb), z_grid):
            rows.append(result_row(times[idx], z, r))
    path = out / f"sweep_{Path(args.profile).stem}.csv"
    _write_rows(path, RESULT_COLUMNS, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return path


VALIDATION_COLUMNS = [
    "profile", "t_s", "z",
    "true_rdt_s", "pred_rdt_s", "rdt_err_pct",
    "true_e_wh", "trad_e_wh", "trad_err_pct", "pred_e_wh", "e_err_pct",
    "true_limiting", "pred_limiting", "bisect_iters", "tmax_residual_degc",
]


def validation_points(cfg: RunConfig, model: HybridCellModel, profiles: dict) -> list[tuple]:
    """The default validation plan: (profile_name, t, z) triples.

    Two held-out variable profiles contribute ``points_per_profile`` points
    each (staggered times, rates from the top of the envelope down); the
    notional flight profile adds four more.
    """
    plan = cfg.validation
    z_max = cfg.rde_plan.z_max
    points = []
    n_profiles = cfg.truth_plan.n_test_cycles
    n_points = plan.points_per_profile
    for i in range(n_profiles):
        name = f"test_cycle_{i}"
        times, _, _, _ = parent_states(model, profiles[name], cfg.limits.Tamb, cfg.limits.Vmin)
        duration = float(times[-1])
        rate_fractions = plan.rate_fractions_a if i % 2 == 0 else plan.rate_fractions_b
        for k in range(n_points):
            frac_t = plan.time_fractions[k % len(plan.time_fractions)]
            frac_z = rate_fractions[k % len(rate_fractions)]
            z = max(cfg.rde_plan.z_min, frac_z * z_max)
            points.append((name, float(round(frac_t * duration)), float(z)))
    if plan.include_evtol:
        times, _, _, _ = parent_states(model, profiles["evtol"], cfg.limits.Tamb, cfg.limits.Vmin)
        horizon = float(times[-1])
        for t, frac_z in zip(plan.evtol_times_s, plan.evtol_rate_fractions):
            if t <= horizon:
                points.append(("evtol", float(t), max(cfg.rde_plan.z_min, frac_z * z_max)))
    return points


def run_validation(cfg: RunConfig, out: Path) -> tuple[Path, list[dict]]:
    predictor = RdePredictor.load(out / "model")
    model = predictor.model
    t_amb = cfg.limits.Tamb
    profiles = {
        name: _resolve_profile(out, name)
        for name in [f"test_cycle_{i}" for i in range(cfg.truth_plan.n_test_cycles)] + ["evtol"]
    }
    points = validation_points(cfg, model, profiles)
    records = []
    for name, t, z in points:
        s = state_at(model, profiles[name], t, t_amb, cfg.limits.Vmin)
        truth = oracle_rde(model, s, z, t_amb, cfg.limits)
        pred = predict_rde(predictor, s, z, t_amb)
        trad = traditional_rde(s, model.params.electrical, model.params.ocv, model.params.electrical.c_o)
        residual = np.nan
        if pred.limiting is Limiting.TEMPERATURE and pred.rdt_tmax is not None:
            residual = abs(model.ht_phi(s, z, t_amb, pred.rdt_tmax) - cfg.limits.Tmax)
        records.append(
            {
                "profile": name,
                "t_s": t,
                "z": z,
                "true_rdt_s": truth.rdt,
                "pred_rdt_s": pred.rdt,
                "rdt_err_pct": relative_error(truth.rdt, pred.rdt),
                "true_e_wh": truth.energy,
                "trad_e_wh": trad,
                "trad_err_pct": relative_error(truth.energy, trad),
                "pred_e_wh": pred.energy,
                "e_err_pct": relative_error(truth.energy, pred.energy),
                "true_limiting": truth.limiting.value,
                "pred_limiting": pred.limiting.value,
                "bisect_iters": pred.bisect_iters,
                "tmax_residual_degc": residual,
            }
        )
    rows = [
        [r["profile"]] + [_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in VALIDATION_COLUMNS[1:]]
        for r in records
    ]
    csv_path = out / "validation.csv"
    _write_rows(csv_path, VALIDATION_COLUMNS, rows)
    _write_validation_text(out / "validation.txt", records)
    return csv_path, records


def _write_validation_text(path: Path, records: list[dict]) -> None:
    header = (
        f"{'profile':<14}{'t [s]':>8}{'z [C]':>8}{'RDT true':>10}{'RDT pred':>10}{'err%':>7}"
        f"{'E true':>9}{'E trad':>9}{'err%':>8}{'E pred':>9}{'err%':>7}  limit(true/pred)"
    )
    lines = [header, "-" * len(header)]
    for r in records:
        lines.append(
            f"{r['profile']:<14}{r['t_s']:>8.0f}{r['z']:>8.3g}{r['true_rdt_s']:>10.1f}"
            f"{r['pred_rdt_s']:>10.1f}{r['rdt_err_pct']:>7.2f}{r['true_e_wh']:>9.3f}"
            f"{r['trad_e_wh']:>9.3f}{r['trad_err_pct']:>8.2f}{r['pred_e_wh']:>9.3f}"
            f"{r['e_err_pct']:>7.2f}  {r['true_limiting']}/{r['pred_limiting']}"
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_validate(cfg: RunConfig, out: Path, args) -> None:
    csv_path, records = run_validation(cfg, out)
    print((out / "validation.txt").read_text())
    e_errs = np.array([r["e_err_pct"] for r in records])
    rdt_errs = np.array([r["rdt_err_pct"] for r in records])
    print(f"RDE error: median {np.median(e_errs):.2f}%, <3% at {np.mean(e_errs < 3.0) * 100:.0f}% of points")
    print(f"RDT error: median {np.median(rdt_errs):.2f}%, <7% at {np.mean(rdt_errs < 7.0) * 100:.0f}% of points")
    print(f"wrote {csv_path}")


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def run_benchmark(cfg: RunConfig, out: Path, n_states: int = 20, z_points: int = 20) -> dict:
    """Wall-clock comparison: network predictor vs forward-simulation oracle.

    Also times the compiled kernels against their uncompiled Python
    fallbacks on a fixed workload, verifying both paths agree.
    """
    predictor = RdePredictor.load(out / "model")
    model = predictor.model
    t_amb = cfg.limits.Tamb
    profile = _resolve_profile(out, "test_cycle_0")
    times, states, _, _ = parent_states(model, profile, t_amb, cfg.limits.Vmin)
    idx = np.linspace(0, times.shape[0] - 1, n_states).astype(int)
    z_grid = np.geomspace(cfg.rde_plan.z_min, cfg.rde_plan.z_max, z_points)

    # Warm-up: jit compilation and allocator effects stay out of the timing.
    warm = CellState.from_array(states[idx[0]])
    predict_rde_sweep(predictor, warm, z_grid, t_amb)
    oracle_rde(model, warm, z_grid[-1], t_amb, cfg.limits)

    pred_times = []
    oracle_times = []
    for i in idx:
        s = CellState.from_array(states[i])
        t0 = time.perf_counter()
        predict_rde_sweep(predictor, s, z_grid, t_amb)
        pred_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        for z in z_grid:
            oracle_rde(model, s, z, t_amb, cfg.limits)
        oracle_times.append(time.perf_counter() - t0)

    grid_times = {}
    mid = CellState.from_array(states[idx[len(idx) // 2]])
    for n in (5, 10, 20):
        sub = np.geomspace(cfg.rde_plan.z_min, cfg.rde_plan.z_max, n)
        t0 = time.perf_counter()
        for z in sub:
            oracle_rde(model, mid, z, t_amb, cfg.limits)
        grid_times[n] = time.perf_counter() - t0

    report = {
        "n_states": int(n_states),
        "z_points": int(z_points),
        "predictor_mean_s": float(np.mean(pred_times)),
        "predictor_max_s": float(np.max(pred_times)),
        "oracle_mean_s": float(np.mean(oracle_times)),
        "speedup": float(np.mean(oracle_times) / np.mean(pred_times)),
        "oracle_by_grid_size_s": {str(k): float(v) for k, v in grid_times.items()},
        "kernels": _kernel_benchmark(model, cfg),
    }
    lines = [
        f"RDE full-grid query, averaged over {n_states} states ({z_points} rates):",
        f"  network predictor : {report['predictor_mean_s'] * 1e3:8.2f} ms  (max {report['predictor_max_s'] * 1e3:.2f} ms)",
        f"  forward simulation: {report['oracle_mean_s'] * 1e3:8.2f} ms",
        f"  speedup           : {report['speedup']:.1f}x",
        "",
        "Oracle time vs rate-grid size: "
        + ", ".join(f"{k} rates = {v * 1e3:.1f} ms" for k, v in grid_times.items()),
        "",
        "Kernel paths (compiled vs Python fallback):",
    ]
    for name, entry in report["kernels"].items():
        lines.append(
            f"  {name:<14} jit {entry['jit_s'] * 1e3:8.2f} ms   python {entry['python_s'] * 1e3:9.2f} ms"
            f"   ratio {entry['ratio']:7.1f}x   max|diff| {entry['max_diff']:.2e}"
        )
    text = "\n".join(lines) + "\n"
    (out / "benchmark.txt").write_text(text)
    print(text)
    return report


def _kernel_benchmark(model: HybridCellModel, cfg: RunConfig) -> dict:
    from .propagator import CellDynamics, rk4_simulate, step_matrices

    dyn = CellDynamics(model.params)
    s0 = equilibrium_state(0.8, cfg.limits.Tamb)
    profile = CurrentProfile(((60.0, 2.0),))
    seg_steps = np.array([6000], dtype=np.int64)
    seg_current = np.array([-2.0 * dyn.c_o])
    args = (
        dyn.a_e, dyn.b_e, dyn.a_t, dyn.b_t[0, 0], dyn.b_t[1, 1],
        dyn.ocv_x, dyn.ocv_c, model.params.electrical.R0,
        0.0, 0.0, 0.0, dyn.i_ref, dyn.t_ref, cfg.limits.Tamb,
        seg_steps, seg_current, s0.as_array(), 0.01, 100,
        False, -np.inf, np.inf, 4, 0.0, -1.0,
    )
    report = {}
    report["cell_rk4"] = _time_kernel(kernels.cell_rk4, args, pick=lambda r: r[1][-1])

    m_e, c_e, m_t, c_t = step_matrices(model.cache, 2.0, cfg.limits.Tamb, 1.0)
    vh, th = model.voltage_head, model.temp_head
    scan_args = (
        m_e, c_e, m_t, c_t, s0.as_array(), -2.0 * model.cache.c_o,
        vh.weights[0], vh.biases[0], vh.weights[1], vh.biases[1],
        vh.weights[2][:, 0].copy(), float(vh.biases[2][0]), vh.norm.mean, vh.norm.scale,
        th.weights[0], th.biases[0], th.weights[1], th.biases[1],
        th.weights[2][:, 0].copy(), float(th.biases[2][0]), th.norm.mean, th.norm.scale,
        cfg.limits.Vmin, cfg.limits.Tmax, True, 4000,
    )
    report["episode_scan"] = _time_kernel(kernels.episode_scan, scan_args, pick=lambda r: r[0])
    return report


def _time_kernel(kernel, args, pick) -> dict:
    python_fn = kernels.hot_python(kernel)
    jit_result = kernel(*args)
    t0 = time.perf_counter()
    jit_result = kernel(*args)
    jit_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    py_result = python_fn(*args)
    python_s = time.perf_counter() - t0
    diff = float(np.max(np.abs(np.asarray(pick(jit_result), dtype=float) - np.asarray(pick(py_result), dtype=float))))
    return {
        "jit_s": float(jit_s),
        "python_s": float(python_s),
        "ratio": float(python_s / jit_s) if jit_s > 0 else float("inf"),
        "max_diff": diff,
        "compiled": kernels.NUMBA_ENABLED,
    }


def cmd_benchmark(cfg: RunConfig, out: Path, args) -> None:
    run_benchmark(cfg, out, n_states=args.states, z_points=args.z_points)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdecast",
        description="Rate-dependent remaining-discharge-energy pipeline",
    )
    parser.add_argument("--config", type=Path, default=None, help="run configuration JSON")
    parser.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None, help="compute threads (numba)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("gen-truth", "write profiles, cell parameters, and truth datasets"),
        ("train-hybrid", "fit the voltage/temperature output heads"),
        ("gen-rde-data", "branch-out episodic dataset generation"),
        ("train-rde", "fit the time-to-cutoff and energy networks"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--force", action="store_true", help="rebuild even if up to date")

    p = sub.add_parser("predict", help="single-state RDE prediction")
    p.add_argument("--profile", default="test_cycle_0")
    p.add_argument("--t", type=float, required=True, help="time along the profile [s]")
    p.add_argument("--z", type=lambda s: [float(v) for v in s.split(",")], required=True,
                   help="comma-separated C-rates")
    p.add_argument("--save", action="store_true", help="also write predict.csv")

    p = sub.add_parser("sweep", help="(time x rate) prediction surface")
    p.add_argument("--profile", default="test_cycle_0")
    p.add_argument("--stride", type=float, default=10.0)
    p.add_argument("--z-points", type=int, default=20)

    sub.add_parser("validate", help="oracle/predictor/baseline comparison table")

    p = sub.add_parser("benchmark", help="predictor vs oracle timing, kernel paths")
    p.add_argument("--states", type=int, default=20)
    p.add_argument("--z-points", type=int, default=20)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and kernels.NUMBA_ENABLED:
        import numba

        numba.set_num_threads(max(1, args.threads))
    try:
        cfg = RunConfig.load(args.config, seed=args.seed)
        out = args.out
        if args.command == "gen-truth":
            stage_gen_truth(cfg, out, args.force)
        elif args.command == "train-hybrid":
            stage_train_hybrid(cfg, out, args.force)
        elif args.command == "gen-rde-data":
            stage_gen_rde_data(cfg, out, args.force)
        elif args.command == "train-rde":
            stage_train_rde(cfg, out, args.force)
        elif args.command == "predict":
            cmd_predict(cfg, out, args)
        elif args.command == "sweep":
            cmd_sweep(cfg, out, args)
        elif args.command == "validate":
            cmd_validate(cfg, out, args)
        elif args.command == "benchmark":
            cmd_benchmark(cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageInputError as exc:
        print(f"stage input error: {exc}", file=sys.stderr)
        return EXIT_STAGE_INPUT
    except (TrainingError, SimulationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
