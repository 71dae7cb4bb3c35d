"""Unit tests for cell parameters, matrices, outputs, and charge accounting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdecast.cell import (
    CellModelError,
    CellParams,
    CellState,
    ElectricalParams,
    OcvCurve,
    OcvDomainError,
    OperatingLimits,
    ThermalParams,
    equilibrium_state,
    f_phy,
    lfp_like_params,
    nca_like_params,
    ndc_matrices,
    soc,
    terminal_voltage_ndc,
    thermal_matrices,
)

UNIT_ELEC = ElectricalParams(Cb=1.0, Cs=1.0, Rb=1.0, R0=1.0, R1=1.0, C1=2.0, c_o=1.0)


def flat_ocv(level=3.3, width=1.0e-3):
    # Strictly increasing but effectively flat curve around `level`.
    u = np.linspace(0.0, 1.0, 11)
    return OcvCurve(u, level - width / 2 + width * u)


class TestElectricalParams:
    def test_rejects_nonpositive(self):
        with pytest.raises(CellModelError):
            ElectricalParams(Cb=0.0, Cs=1, Rb=1, R0=1, R1=1, C1=1, c_o=1)
        with pytest.raises(CellModelError):
            ElectricalParams(Cb=1, Cs=1, Rb=-2, R0=1, R1=1, C1=1, c_o=1)

    def test_rejects_degenerate_spectrum(self):
        # (Cb+Cs)/(Cb*Cs*Rb) = 2 = 1/(R1*C1)
        with pytest.raises(CellModelError, match="degenerate"):
            ElectricalParams(Cb=1, Cs=1, Rb=1, R0=1, R1=1, C1=0.5, c_o=1)


class TestNdcMatrices:
    def test_unit_parameters(self):
        a, b = ndc_matrices(ElectricalParams(Cb=1, Cs=1, Rb=1, R0=1, R1=1, C1=1.000001, c_o=1))
        np.testing.assert_allclose(a, [[-1, 1, 0], [1, -1, 0], [0, 0, -1 / 1.000001]])
        np.testing.assert_allclose(b, [0, 1, 1 / 1.000001])

    def test_mixed_parameters(self):
        p = ElectricalParams(Cb=2, Cs=1, Rb=0.5, R0=1, R1=1, C1=2, c_o=1)
        a, b = ndc_matrices(p)
        np.testing.assert_allclose(a, [[-1, 1, 0], [2, -2, 0], [0, 0, -0.5]])
        np.testing.assert_allclose(b, [0, 1, 0.5])

    @given(
        cb=st.floats(0.5, 5e4),
        cs=st.floats(0.5, 5e4),
        rb=st.floats(1e-4, 10.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_charge_conservation_structure(self, cb, cs, rb):
        # Row sums of the diffusion rows vanish for any valid parameters.
        p = ElectricalParams(Cb=cb, Cs=cs, Rb=rb, R0=0.02, R1=0.01, C1=3000.0, c_o=2.5)
        a, _ = ndc_matrices(p)
        assert abs(a[0].sum()) < 1e-12 * abs(a[0, 0] or 1.0)
        assert abs(a[1].sum()) < 1e-12 * abs(a[1, 0] or 1.0)


class TestThermalMatrices:
    def test_unit_parameters(self):
        therm = ThermalParams(C_core=1, C_surf=1, R_core=1, R_surf=1)
        a, b = thermal_matrices(therm, R0=1.0)
        np.testing.assert_allclose(a, [[-1, 1], [1, -2]])
        np.testing.assert_allclose(b, [[1, 0], [0, 1]])

    def test_mixed_parameters(self):
        therm = ThermalParams(C_core=10, C_surf=5, R_core=2, R_surf=3)
        a, b = thermal_matrices(therm, R0=0.02)
        np.testing.assert_allclose(a, [[-0.05, 0.05], [0.1, -1 / 6 - 0.1]])
        np.testing.assert_allclose(b, [[0.002, 0], [0, 1 / 15]])

    @given(
        cc=st.floats(1.0, 100.0),
        cs=st.floats(1.0, 100.0),
        rc=st.floats(0.05, 10.0),
        rs=st.floats(0.05, 10.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_eigenvalues_negative(self, cc, cs, rc, rs):
        therm = ThermalParams(C_core=cc, C_surf=cs, R_core=rc, R_surf=rs)
        eig = np.linalg.eigvals(therm.matrix())
        assert np.all(np.real(eig) < 0)


class TestTerminalVoltage:
    def test_rest_is_ocv(self):
        s = CellState(0.5, 0.5, 0.0, 25.0, 25.0)
        assert terminal_voltage_ndc(s, 0.0, UNIT_ELEC, flat_ocv()) == pytest.approx(3.3, abs=1e-3)

    def test_discharge_ir_drop(self):
        s = CellState(0.5, 0.5, 0.0, 25.0, 25.0)
        p = ElectricalParams(Cb=1, Cs=1, Rb=1, R0=0.02, R1=1, C1=2, c_o=1)
        v = terminal_voltage_ndc(s, -5.0, p, flat_ocv())
        assert v == pytest.approx(3.3 - 0.1, abs=1e-3)

    def test_polarization_term(self):
        s = CellState(0.5, 0.5, -0.05, 25.0, 25.0)
        v = terminal_voltage_ndc(s, 0.0, UNIT_ELEC, flat_ocv())
        assert v == pytest.approx(3.25, abs=1e-3)

    def test_domain_error_and_clamp(self):
        s = CellState(0.5, -0.2, 0.0, 25.0, 25.0)
        ocv = nca_like_params().ocv
        with pytest.raises(OcvDomainError):
            terminal_voltage_ndc(s, 0.0, UNIT_ELEC, ocv)
        clamped = terminal_voltage_ndc(s, 0.0, UNIT_ELEC, ocv, clamp=True)
        assert np.isfinite(clamped)

    def test_voltage_decreases_with_discharge_current(self):
        p = nca_like_params()
        s = CellState(0.7, 0.68, -0.02, 30.0, 28.0)
        v = [terminal_voltage_ndc(s, cur, p.electrical, p.ocv) for cur in (0.0, -5.0, -10.0)]
        assert v[0] > v[1] > v[2]


class TestFPhy:
    def test_equilibrium_fixed_point(self):
        p = nca_like_params()
        s = equilibrium_state(0.7, 25.0)
        dx = f_phy(s, 0.0, 25.0, p.electrical, p.thermal)
        np.testing.assert_array_equal(dx, np.zeros(5))

    def test_diffusion_signs_unit_params(self):
        p = ElectricalParams(Cb=1, Cs=1, Rb=1, R0=1, R1=1, C1=2, c_o=1)
        therm = ThermalParams(C_core=1, C_surf=1, R_core=1, R_surf=1)
        s = CellState(1.0, 0.0, 0.0, 25.0, 25.0)
        dx = f_phy(s, 0.0, 25.0, p, therm)
        assert dx[0] == pytest.approx(-1.0)
        assert dx[1] == pytest.approx(1.0)

    def test_matches_block_matrix_action(self):
        # Independent oracle: brute-force block matrix-vector product.
        p = nca_like_params()
        rng = np.random.default_rng(42)
        for _ in range(20):
            x = rng.normal(size=5) * [1, 1, 0.1, 10, 10] + [0.5, 0.5, 0, 25, 25]
            s = CellState.from_array(x)
            current, t_amb = rng.uniform(-20, 0), rng.uniform(0, 45)
            a_e, b_e = ndc_matrices(p.electrical)
            a_t, b_t = thermal_matrices(p.thermal, p.electrical.R0)
            big_a = np.zeros((5, 5))
            big_a[:3, :3] = a_e
            big_a[3:, 3:] = a_t
            forcing = np.concatenate([b_e * current, b_t @ [current**2, t_amb]])
            expected = big_a @ x + forcing
            np.testing.assert_allclose(
                f_phy(s, current, t_amb, p.electrical, p.thermal), expected, rtol=1e-12
            )


class TestSoc:
    def test_full_charge(self):
        assert soc(CellState(1.0, 1.0, 0.0, 25, 25), UNIT_ELEC) == 1.0

    def test_weighted_mean(self):
        p = ElectricalParams(Cb=3, Cs=1, Rb=1, R0=1, R1=1, C1=2, c_o=1)
        assert soc(CellState(1.0, 0.0, 0.0, 25, 25), p) == pytest.approx(0.75)

    def test_clamped(self):
        assert soc(CellState(1.2, 1.2, 0.0, 25, 25), UNIT_ELEC) == 1.0


class TestOcvCurve:
    def test_monotone_and_smooth(self):
        for params in (nca_like_params(), lfp_like_params()):
            u = np.linspace(0.0, 1.0, 501)
            v = params.ocv(u)
            assert np.all(np.diff(v) > 0)
            assert np.all(params.ocv.derivative(u[1:-1]) > 0)

    def test_rejects_nonmonotone(self):
        with pytest.raises(CellModelError):
            OcvCurve(np.array([0, 0.3, 0.6, 1.0]), np.array([3.0, 3.5, 3.4, 4.2]))

    def test_inverse(self):
        ocv = nca_like_params().ocv
        for v in (3.1, 3.5, 4.0):
            assert ocv(ocv.inverse(v)) == pytest.approx(v, abs=1e-9)


class TestCellParamsIO:
    def test_roundtrip(self, tmp_path):
        params = nca_like_params()
        path = tmp_path / "cell.json"
        params.save(path)
        loaded = CellParams.load(path)
        assert loaded.electrical == params.electrical
        assert loaded.thermal == params.thermal
        assert loaded.limits == params.limits
        np.testing.assert_array_equal(loaded.ocv.u, params.ocv.u)
        np.testing.assert_array_equal(loaded.ocv.voltage, params.ocv.voltage)

    def test_missing_field(self, tmp_path):
        params = nca_like_params()
        doc = params.to_dict()
        del doc["ThermalParams"]
        with pytest.raises(CellModelError, match="ThermalParams"):
            CellParams.from_dict(doc)

    def test_limits_window_check(self):
        params = nca_like_params()
        with pytest.raises(CellModelError):
            CellParams(
                params.electrical,
                params.thermal,
                params.ocv,
                OperatingLimits(Vmin=2.0, Tmax=50.0, Tamb=25.0),
            )
