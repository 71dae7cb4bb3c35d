"""Profile synthesis, branch-out episode generation, dataset round trips."""

import numpy as np
import pytest

from rdecast.cell import nca_like_params
from rdecast.datagen import (
    CurrentProfile,
    DatasetFormatError,
    EnergyDataset,
    RdtDataset,
    branch_out_generate,
    evtol_profile,
    load_profile,
    save_profile,
    synth_drive_cycle,
)

NCA = nca_like_params()


class TestCurrentProfile:
    def test_validation(self):
        with pytest.raises(ValueError):
            CurrentProfile(())
        with pytest.raises(ValueError):
            CurrentProfile(((0.0, 1.0),))
        with pytest.raises(ValueError):
            CurrentProfile(((10.0, -1.0),))

    def test_rate_lookup_right_continuous(self):
        profile = CurrentProfile(((10.0, 1.0), (5.0, 3.0)))
        assert profile.rate_at(0.0) == 1.0
        assert profile.rate_at(9.999) == 1.0
        assert profile.rate_at(10.0) == 3.0
        assert profile.rate_at(15.0) == 3.0  # past the end: last segment holds
        np.testing.assert_array_equal(profile.rates_at([0.0, 10.0, 14.0]), [1.0, 3.0, 3.0])

    def test_roundtrip(self, tmp_path):
        profile = CurrentProfile(((12.0, 0.5), (33.0, 4.25)))
        path = tmp_path / "p.csv"
        save_profile(profile, path)
        loaded = load_profile(path)
        assert loaded.segments == profile.segments

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("duration,c\n1,2\n")
        with pytest.raises(DatasetFormatError, match="header"):
            load_profile(path)

    def test_bad_line_numbered(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("duration_s,c_rate\n10,1.0\nxx,2.0\n")
        with pytest.raises(DatasetFormatError, match="line 3"):
            load_profile(path)


class TestSynthDriveCycle:
    def test_deterministic(self):
        assert synth_drive_cycle(42, 600.0, 8.0).segments == synth_drive_cycle(42, 600.0, 8.0).segments

    def test_rates_in_range(self):
        for seed in range(20):
            profile = synth_drive_cycle(seed, 900.0, 8.0)
            rates = [r for _, r in profile.segments]
            assert min(rates) >= 0.0
            assert max(rates) <= 8.0

    def test_duration_and_segment_lengths(self):
        profile = synth_drive_cycle(3, 1234.0, 8.0)
        assert profile.duration == pytest.approx(1234.0)
        durations = [d for d, _ in profile.segments[:-1]]  # last may be clipped
        assert min(durations) >= 5.0
        assert max(durations) <= 60.0

    def test_mean_rate_band_monte_carlo(self):
        # Empirical duration-weighted mean over many seeds stays in the
        # low-to-mid band of the rate ceiling.
        means = [synth_drive_cycle(seed, 1800.0, 8.0).mean_rate() for seed in range(100)]
        grand = np.mean(means)
        assert 0.15 * 8.0 <= grand <= 0.5 * 8.0


class TestEvtolProfile:
    def test_phase_rates(self):
        profile = evtol_profile()
        assert [r for _, r in profile.segments] == [5.0, 1.48, 5.0]

    def test_default_duration(self):
        assert evtol_profile().duration == pytest.approx(1080.0)

    def test_monotone_soc_decrease(self, tiny_hybrid_model):
        from rdecast.cell import equilibrium_state, soc

        model = tiny_hybrid_model
        _, states, _ = model.state_trajectory(evtol_profile(), equilibrium_state(1.0, 25.0), 25.0)
        socs = (NCA.electrical.Cb * states[:, 0] + NCA.electrical.Cs * states[:, 1]) / (
            NCA.electrical.Cb + NCA.electrical.Cs
        )
        assert np.all(np.diff(socs) < 0)


@pytest.fixture(scope="module")
def small_branch_out(tiny_hybrid_model):
    profile = synth_drive_cycle(11, 420.0, 8.0)
    z_grid = np.geomspace(0.5, 8.0, 5)
    return branch_out_generate(
        tiny_hybrid_model, profile, z_grid, 30.0, 25.0, NCA.limits, rows_per_episode=50
    )


class TestBranchOut:
    def test_sample_bookkeeping(self, small_branch_out):
        result = small_branch_out
        n_strides = int(result.parent_duration // 30.0) + 1
        assert 0 < len(result.rdt) <= n_strides * 5
        # Energy rows group one episode each, opened by the dt = 0 row.
        starts = np.nonzero(result.energy.dt == 0.0)[0]
        assert starts.shape[0] == len(result.rdt)

    def test_energy_zero_at_zero_horizon(self, small_branch_out):
        energy = small_branch_out.energy
        assert np.all(energy.energy[energy.dt == 0.0] == 0.0)

    def test_energy_strictly_increasing_within_episode(self, small_branch_out):
        energy = small_branch_out.energy
        starts = np.nonzero(energy.dt == 0.0)[0]
        bounds = np.append(starts, len(energy))
        for i in range(min(60, starts.shape[0])):
            e = energy.energy[bounds[i] : bounds[i + 1]]
            dt = energy.dt[bounds[i] : bounds[i + 1]]
            assert np.all(np.diff(e) > 0)
            assert np.all(np.diff(dt) > 0)
            assert dt[-1] >= dt[-2]  # final row is the refined cutoff sample

    def test_dt_bounded_by_episode_rdt(self, small_branch_out):
        result = small_branch_out
        energy = result.energy
        starts = np.nonzero(energy.dt == 0.0)[0]
        bounds = np.append(starts, len(energy))
        for i in range(starts.shape[0]):
            assert energy.dt[bounds[i + 1] - 1] == pytest.approx(result.rdt.rdt[i], abs=1e-9)

    def test_rdt_positive_and_unique_per_key(self, small_branch_out):
        rdt = small_branch_out.rdt
        assert np.all(rdt.rdt > 0)
        keys = np.round(np.column_stack([rdt.states, rdt.z, rdt.t_amb]), 12)
        _, counts = np.unique(keys, axis=0, return_counts=True)
        assert np.all(counts == 1)

    def test_rate_capacity_at_data_level(self, small_branch_out):
        # Within one stride, delivered charge and final energy shrink with
        # the rate (checked on the hybrid model's own episodes).
        result = small_branch_out
        rdt = result.rdt
        energy = result.energy
        starts = np.nonzero(energy.dt == 0.0)[0]
        finals = energy.energy[np.append(starts[1:], len(energy)) - 1]
        state_keys = np.round(rdt.states @ np.array([1.0, 7.0, 13.0, 0.17, 0.29]), 9)
        for key in np.unique(state_keys)[:40]:
            mask = state_keys == key
            if mask.sum() < 2:
                continue
            order = np.argsort(rdt.z[mask])
            charge = (rdt.rdt[mask] * rdt.z[mask])[order]
            assert np.all(np.diff(charge) < 1e-6)
            assert np.all(np.diff(finals[mask][order]) < 1e-6)

    def test_grid_convergence_of_trapezoid(self, tiny_hybrid_model):
        # Halving the episode grid moves the final energy by < 0.1%.
        from rdecast.cell import equilibrium_state

        model = tiny_hybrid_model
        s = equilibrium_state(0.8, 25.0)
        vmin = NCA.limits.Vmin

        def final_energy(grid):
            v, _, k_v, _ = model.dense_scan(s, 2.0, 25.0, vmin, None, grid=grid)
            c_o = NCA.electrical.c_o
            return float(np.sum(0.5 * (v[:-1] + v[1:])) * grid * 2.0 * c_o / 3600.0)

        e1 = final_energy(1.0)
        e2 = final_energy(0.5)
        assert abs(e1 - e2) / e2 < 1e-3


class TestDatasetIO:
    def test_rdt_roundtrip(self, small_branch_out, tmp_path):
        rdt = small_branch_out.rdt
        path = tmp_path / "rdt.csv"
        rdt.save(path)
        loaded = RdtDataset.load(path)
        assert len(loaded) == len(rdt)
        np.testing.assert_allclose(loaded.rdt, rdt.rdt, rtol=1e-8)
        np.testing.assert_allclose(loaded.states, rdt.states, rtol=1e-8)

    def test_energy_roundtrip_and_finals(self, small_branch_out, tmp_path):
        energy = small_branch_out.energy
        path = tmp_path / "energy.csv"
        energy.save(path)
        loaded = EnergyDataset.load(path)
        assert len(loaded) == len(energy)
        np.testing.assert_allclose(loaded.energy, energy.energy, rtol=1e-8, atol=1e-12)
        finals = loaded.ensure_episode_finals()
        ref = energy.episode_final_energy
        np.testing.assert_allclose(finals, ref, rtol=1e-8, atol=1e-12)

    def test_missing_column_named(self, small_branch_out, tmp_path):
        path = tmp_path / "rdt.csv"
        frame = small_branch_out.rdt.to_frame().drop(columns=["tamb"])
        frame.to_csv(path, index=False)
        with pytest.raises(DatasetFormatError, match="tamb"):
            RdtDataset.load(path)

    def test_bulk_roundtrip_million_rows(self, tmp_path):
        # Count-preserving round trip on a synthetic seven-figure dataset.
        rng = np.random.default_rng(0)
        n = 1_000_000
        ds = EnergyDataset(
            states=rng.uniform(0, 1, size=(n, 5)),
            z=rng.uniform(0.2, 8.0, n),
            t_amb=np.full(n, 25.0),
            dt=rng.uniform(0, 1000, n),
            energy=rng.uniform(0, 9, n),
        )
        path = tmp_path / "bulk.csv"
        ds.save(path)
        assert len(EnergyDataset.load(path)) == n

    def test_decimate_deterministic(self, small_branch_out):
        energy = small_branch_out.energy
        a = energy.decimate(500, seed=1)
        b = energy.decimate(500, seed=1)
        assert len(a) == 500
        np.testing.assert_array_equal(a.energy, b.energy)
