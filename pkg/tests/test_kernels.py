"""Compiled kernels against their pure-Python fallbacks and against numpy
reference evaluations."""

import numpy as np
import pytest

from rdecast import kernels
from rdecast.cell import equilibrium_state, nca_like_params
from rdecast.propagator import CellDynamics, PropagatorCache, step_matrices

NCA = nca_like_params()


def test_numba_flag_reflects_environment():
    # The suite runs with the compiled path by default; the fallback is the
    # same function object uncompiled.
    if kernels.NUMBA_ENABLED:
        assert hasattr(kernels.cell_rk4, "py_func")
    else:
        assert kernels.hot_python(kernels.cell_rk4) is kernels.cell_rk4


class TestPchipEval:
    def test_matches_scipy_inside_domain(self):
        ocv = NCA.ocv
        xk, coef = ocv.coefficient_arrays()
        for u in np.linspace(0.0, 1.0, 97):
            assert kernels.pchip_eval(xk, coef, float(u)) == pytest.approx(
                float(ocv(u)), abs=1e-12
            )

    def test_linear_extension_outside(self):
        ocv = NCA.ocv
        xk, coef = ocv.coefficient_arrays()
        for u in (-0.2, -0.01, 1.01, 1.3):
            assert kernels.pchip_eval(xk, coef, u) == pytest.approx(
                float(ocv(u, clamp=True)), abs=1e-12
            )

    def test_python_path_agrees(self):
        ocv = NCA.ocv
        xk, coef = ocv.coefficient_arrays()
        py = kernels.hot_python(kernels.pchip_eval)
        for u in (-0.1, 0.0, 0.37, 0.62, 1.0, 1.1):
            assert py(xk, coef, u) == kernels.pchip_eval(xk, coef, u)


def _rk4_args(n_steps=500, record_every=100, check=False):
    dyn = CellDynamics(NCA, alpha_r=0.01, beta_r=0.3, gamma_q=0.2, z_ref=8.0)
    s0 = equilibrium_state(0.9, 25.0)
    return (
        dyn.a_e,
        dyn.b_e,
        dyn.a_t,
        dyn.b_t[0, 0],
        dyn.b_t[1, 1],
        dyn.ocv_x,
        dyn.ocv_c,
        NCA.electrical.R0,
        dyn.alpha_r,
        dyn.beta_r,
        dyn.gamma_q,
        dyn.i_ref,
        dyn.t_ref,
        25.0,
        np.array([n_steps], dtype=np.int64),
        np.array([-3.0 * dyn.c_o]),
        s0.as_array(),
        0.01,
        record_every,
        check,
        3.0,
        50.0,
        4,
        0.0,
        -1.0,
    )


class TestCellRk4Paths:
    def test_python_fallback_matches_compiled(self):
        args = _rk4_args()
        jit_out = kernels.cell_rk4(*args)
        py_out = kernels.hot_python(kernels.cell_rk4)(*args)
        for a, b in zip(jit_out[:4], py_out[:4]):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
        assert jit_out[4] == py_out[4]
        assert jit_out[5] == py_out[5]

    def test_recording_grid(self):
        rec_t, rec_x, rec_v, rec_tl, stop_code, stop_step, _, _ = kernels.cell_rk4(*_rk4_args())
        assert stop_code == kernels.STOP_HORIZON
        np.testing.assert_allclose(rec_t, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
        assert rec_x.shape == (6, 5)
        assert np.all(np.isfinite(rec_v))


class TestEpisodeScanPaths:
    @pytest.fixture(scope="class")
    def scan_args(self, trained_tiny_heads):
        vh, th = trained_tiny_heads
        cache = PropagatorCache(NCA.electrical, NCA.thermal)
        m_e, c_e, m_t, c_t = step_matrices(cache, 2.0, 25.0, 1.0)
        s0 = equilibrium_state(0.6, 25.0)
        return (
            m_e, c_e, m_t, c_t, s0.as_array(), -2.0 * cache.c_o,
            vh.weights[0], vh.biases[0], vh.weights[1], vh.biases[1],
            vh.weights[2][:, 0].copy(), float(vh.biases[2][0]), vh.norm.mean, vh.norm.scale,
            th.weights[0], th.biases[0], th.weights[1], th.biases[1],
            th.weights[2][:, 0].copy(), float(th.biases[2][0]), th.norm.mean, th.norm.scale,
            3.0, 50.0, True, 4000,
        )

    def test_python_fallback_matches_compiled(self, scan_args):
        v_j, t_j, kv_j, kt_j = kernels.episode_scan(*scan_args)
        v_p, t_p, kv_p, kt_p = kernels.hot_python(kernels.episode_scan)(*scan_args)
        assert (kv_j, kt_j) == (kv_p, kt_p)
        np.testing.assert_allclose(v_j, v_p, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(t_j, t_p, rtol=1e-13, atol=1e-13)

    def test_matches_batched_numpy_heads(self, scan_args, trained_tiny_heads):
        from rdecast.neural import mlp_forward
        from rdecast.propagator import propagate_grid

        vh, th = trained_tiny_heads
        cache = PropagatorCache(NCA.electrical, NCA.thermal)
        v_arr, t_arr, k_v, k_t = kernels.episode_scan(*scan_args)
        assert k_v > 0
        dts = np.arange(k_v + 1, dtype=float)
        states = propagate_grid(scan_args[4], 2.0, 25.0, dts, cache)
        v_ref = mlp_forward(vh, np.column_stack([states, np.full(k_v + 1, -2.0 * cache.c_o)]))[:, 0]
        t_ref = mlp_forward(th, states[:, [0, 3, 4]])[:, 0]
        np.testing.assert_allclose(v_arr, v_ref, atol=1e-10)
        np.testing.assert_allclose(t_arr, t_ref, atol=1e-10)
        assert v_arr[-1] < 3.0 <= v_arr[-2]
