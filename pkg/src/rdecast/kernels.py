"""Jit-compiled inner loops for simulation and the forward-simulation oracle.

Two loops dominate the runtime of this package: the fixed-step RK4
integration of the cell dynamics (truth generation, propagator oracle) and
the dense per-second scan of the hybrid model used by the forward-simulation
oracle.  Both are compiled with numba ``@njit`` when available.

Setting the environment variable ``RDECAST_DISABLE_NUMBA=1`` (or running
without numba installed) selects the pure-Python/numpy fallback: the same
functions, uncompiled.  Results are identical up to floating-point rounding;
only speed differs.  When compiled, the original Python implementations stay
reachable via ``<kernel>.py_func`` (used by the fallback-equivalence tests
and the kernel benchmark).
"""

from __future__ import annotations

import math
import os

import numpy as np

NUMBA_ENABLED = os.environ.get("RDECAST_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

if NUMBA_ENABLED:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    def _hot(func):
        return numba.njit(cache=True, fastmath=False)(func)
else:
    def _hot(func):
        return func


def hot_python(func):
    """Uncompiled version of a kernel (for benchmarks and path checks)."""
    return getattr(func, "py_func", func)


# Stop codes shared with the Python layer.
STOP_HORIZON = 0
STOP_VOLTAGE = 1
STOP_TEMPERATURE = 2
STOP_NONFINITE = 3
STOP_VALIDITY = 4


@_hot
def pchip_eval(xk, coef, u):
    """Evaluate a cubic spline in PPoly layout with linear end extension.

    ``coef`` has shape (4, len(xk) - 1); interval ``i`` evaluates as
    ``((c0*dx + c1)*dx + c2)*dx + c3`` with ``dx = u - xk[i]``.  Outside the
    breakpoint range the curve continues linearly with the end slopes, which
    keeps a monotone spline monotone.
    """
    n = xk.shape[0]
    if u <= xk[0]:
        # c2 of the first interval is the derivative at the left end.
        return coef[3, 0] + coef[2, 0] * (u - xk[0])
    if u >= xk[n - 1]:
        dx = xk[n - 1] - xk[n - 2]
        j = n - 2
        val = ((coef[0, j] * dx + coef[1, j]) * dx + coef[2, j]) * dx + coef[3, j]
        slope = (3.0 * coef[0, j] * dx + 2.0 * coef[1, j]) * dx + coef[2, j]
        return val + slope * (u - xk[n - 1])
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if xk[mid] <= u:
            lo = mid
        else:
            hi = mid
    dx = u - xk[lo]
    return ((coef[0, lo] * dx + coef[1, lo]) * dx + coef[2, lo]) * dx + coef[3, lo]


@_hot
def _softplus(a):
    if a > 0.0:
        return a + math.log1p(math.exp(-a))
    return math.log1p(math.exp(a))


@_hot
def cell_rk4(
    a_e,
    b_e,
    a_t,
    b_t00,
    b_t11,
    ocv_x,
    ocv_c,
    r0,
    alpha_r,
    beta_r,
    gamma_q,
    i_ref,
    t_ref,
    t_amb,
    seg_steps,
    seg_current,
    x0,
    h,
    record_every,
    check_limits,
    vmin,
    tmax,
    tlim_index,
    v_lo,
    v_hi,
):
    """Fixed-step RK4 integration of the cell over piecewise-constant current.

    The dynamics are affine within each segment: the electrical block sees the
    segment current, the thermal block a constant core heat input
    ``r0 * I**2 * (1 + gamma_q*|I|/i_ref)`` plus the ambient coupling.  The
    output voltage applies the resistance residuals
    ``r0*I*(1 + alpha_r*(Tcore - t_ref) + beta_r*|I|/i_ref)``; zero residual
    coefficients reproduce the plain physics model.

    Limits (when ``check_limits``) are tested at every integration step:
    voltage strictly below ``vmin`` or limit-channel temperature at or above
    ``tmax`` stops the run.  Recording happens every ``record_every`` steps.

    Returns ``(rec_t, rec_x, rec_v, rec_T, stop_code, stop_step, bracket,
    x_final)`` where ``bracket`` holds times, outputs, and states of the two
    integration steps around the stop for downstream refinement:
    ``[t_prev, v_prev, T_prev, x_prev(5), t_stop, v_stop, T_stop, x_stop(5)]``.
    """
    total_steps = 0
    for i in range(seg_steps.shape[0]):
        total_steps += seg_steps[i]
    n_rec_max = total_steps // record_every + 2
    rec_t = np.empty(n_rec_max)
    rec_x = np.empty((n_rec_max, 5))
    rec_v = np.empty(n_rec_max)
    rec_tl = np.empty(n_rec_max)
    bracket = np.zeros(16)

    x = x0.copy()
    t = 0.0
    step = 0
    n_rec = 0
    stop_code = STOP_HORIZON
    stop_step = -1

    prev_v = 0.0
    prev_tl = 0.0
    prev_t = 0.0
    px0 = x[0]
    px1 = x[1]
    px2 = x[2]
    px3 = x[3]
    px4 = x[4]

    done = False
    for si in range(seg_steps.shape[0]):
        if done:
            break
        cur = seg_current[si]
        q_core = b_t00 * cur * cur * (1.0 + gamma_q * abs(cur) / i_ref)
        u_amb = b_t11 * t_amb
        r_eff_base = 1.0 + beta_r * abs(cur) / i_ref
        for _ in range(seg_steps[si]):
            # Output and limit check at the current sample (includes t=0).
            v = (
                pchip_eval(ocv_x, ocv_c, x[1])
                + x[2]
                + r0 * cur * (r_eff_base + alpha_r * (x[3] - t_ref))
            )
            tl = x[tlim_index]
            if step % record_every == 0:
                rec_t[n_rec] = t
                rec_x[n_rec, 0] = x[0]
                rec_x[n_rec, 1] = x[1]
                rec_x[n_rec, 2] = x[2]
                rec_x[n_rec, 3] = x[3]
                rec_x[n_rec, 4] = x[4]
                rec_v[n_rec] = v
                rec_tl[n_rec] = tl
                n_rec += 1
            if not (
                np.isfinite(x[0])
                and np.isfinite(x[1])
                and np.isfinite(x[2])
                and np.isfinite(x[3])
                and np.isfinite(x[4])
            ):
                stop_code = STOP_NONFINITE
                stop_step = step
                done = True
            elif check_limits and v < vmin:
                stop_code = STOP_VOLTAGE
                stop_step = step
                done = True
            elif check_limits and tl >= tmax:
                stop_code = STOP_TEMPERATURE
                stop_step = step
                done = True
            elif v_lo < v_hi and (v < v_lo or v > v_hi):
                stop_code = STOP_VALIDITY
                stop_step = step
                done = True
            if done:
                bracket[0] = prev_t
                bracket[1] = prev_v
                bracket[2] = prev_tl
                bracket[3] = px0
                bracket[4] = px1
                bracket[5] = px2
                bracket[6] = px3
                bracket[7] = px4
                bracket[8] = t
                bracket[9] = v
                bracket[10] = tl
                bracket[11] = x[0]
                bracket[12] = x[1]
                bracket[13] = x[2]
                bracket[14] = x[3]
                bracket[15] = x[4]
                break
            prev_t = t
            prev_v = v
            prev_tl = tl
            px0 = x[0]
            px1 = x[1]
            px2 = x[2]
            px3 = x[3]
            px4 = x[4]

            # One RK4 step of the segment-affine dynamics.
            x0_, x1_, x2_, x3_, x4_ = x[0], x[1], x[2], x[3], x[4]

            k1_0 = a_e[0, 0] * x0_ + a_e[0, 1] * x1_
            k1_1 = a_e[1, 0] * x0_ + a_e[1, 1] * x1_ + b_e[1] * cur
            k1_2 = a_e[2, 2] * x2_ + b_e[2] * cur
            k1_3 = a_t[0, 0] * x3_ + a_t[0, 1] * x4_ + q_core
            k1_4 = a_t[1, 0] * x3_ + a_t[1, 1] * x4_ + u_amb

            y0 = x0_ + 0.5 * h * k1_0
            y1 = x1_ + 0.5 * h * k1_1
            y2 = x2_ + 0.5 * h * k1_2
            y3 = x3_ + 0.5 * h * k1_3
            y4 = x4_ + 0.5 * h * k1_4
            k2_0 = a_e[0, 0] * y0 + a_e[0, 1] * y1
            k2_1 = a_e[1, 0] * y0 + a_e[1, 1] * y1 + b_e[1] * cur
            k2_2 = a_e[2, 2] * y2 + b_e[2] * cur
            k2_3 = a_t[0, 0] * y3 + a_t[0, 1] * y4 + q_core
            k2_4 = a_t[1, 0] * y3 + a_t[1, 1] * y4 + u_amb

            y0 = x0_ + 0.5 * h * k2_0
            y1 = x1_ + 0.5 * h * k2_1
            y2 = x2_ + 0.5 * h * k2_2
            y3 = x3_ + 0.5 * h * k2_3
            y4 = x4_ + 0.5 * h * k2_4
            k3_0 = a_e[0, 0] * y0 + a_e[0, 1] * y1
            k3_1 = a_e[1, 0] * y0 + a_e[1, 1] * y1 + b_e[1] * cur
            k3_2 = a_e[2, 2] * y2 + b_e[2] * cur
            k3_3 = a_t[0, 0] * y3 + a_t[0, 1] * y4 + q_core
            k3_4 = a_t[1, 0] * y3 + a_t[1, 1] * y4 + u_amb

            y0 = x0_ + h * k3_0
            y1 = x1_ + h * k3_1
            y2 = x2_ + h * k3_2
            y3 = x3_ + h * k3_3
            y4 = x4_ + h * k3_4
            k4_0 = a_e[0, 0] * y0 + a_e[0, 1] * y1
            k4_1 = a_e[1, 0] * y0 + a_e[1, 1] * y1 + b_e[1] * cur
            k4_2 = a_e[2, 2] * y2 + b_e[2] * cur
            k4_3 = a_t[0, 0] * y3 + a_t[0, 1] * y4 + q_core
            k4_4 = a_t[1, 0] * y3 + a_t[1, 1] * y4 + u_amb

            s = h / 6.0
            x[0] = x0_ + s * (k1_0 + 2.0 * k2_0 + 2.0 * k3_0 + k4_0)
            x[1] = x1_ + s * (k1_1 + 2.0 * k2_1 + 2.0 * k3_1 + k4_1)
            x[2] = x2_ + s * (k1_2 + 2.0 * k2_2 + 2.0 * k3_2 + k4_2)
            x[3] = x3_ + s * (k1_3 + 2.0 * k2_3 + 2.0 * k3_3 + k4_3)
            x[4] = x4_ + s * (k1_4 + 2.0 * k2_4 + 2.0 * k3_4 + k4_4)

            step += 1
            t = step * h

    if not done:
        # Record the horizon endpoint.
        cur = seg_current[seg_steps.shape[0] - 1]
        r_eff_base = 1.0 + beta_r * abs(cur) / i_ref
        v = (
            pchip_eval(ocv_x, ocv_c, x[1])
            + x[2]
            + r0 * cur * (r_eff_base + alpha_r * (x[3] - t_ref))
        )
        rec_t[n_rec] = t
        rec_x[n_rec, 0] = x[0]
        rec_x[n_rec, 1] = x[1]
        rec_x[n_rec, 2] = x[2]
        rec_x[n_rec, 3] = x[3]
        rec_x[n_rec, 4] = x[4]
        rec_v[n_rec] = v
        rec_tl[n_rec] = x[tlim_index]
        n_rec += 1
        stop_step = step

    return (
        rec_t[:n_rec].copy(),
        rec_x[:n_rec].copy(),
        rec_v[:n_rec].copy(),
        rec_tl[:n_rec].copy(),
        stop_code,
        stop_step,
        bracket,
        x.copy(),
    )


@_hot
def episode_scan(
    m_e,
    c_e,
    m_t,
    c_t,
    x0,
    current,
    vw1,
    vb1,
    vw2,
    vb2,
    vw3,
    vb3,
    vmean,
    vscale,
    tw1,
    tb1,
    tw2,
    tb2,
    tw3,
    tb3,
    tmean,
    tscale,
    vmin,
    tmax,
    use_tmax,
    max_steps,
):
    """Dense constant-rate scan of the hybrid model on a one-second grid.

    Advances the state with the exact one-step affine maps ``x1 -> m_e@x1 +
    c_e`` and ``x2 -> m_t@x2 + c_t`` (closed-form propagation, no truncation
    error), evaluating the voltage and surface-temperature heads at every grid
    point.  Runs until the voltage head first drops below ``vmin``; also
    reports the first grid index at or above ``tmax`` if one occurs earlier.

    Returns ``(v, T, k_v, k_t)``: head outputs on the grid up to and
    including the voltage crossing sample, the crossing index ``k_v`` (-1 if
    not reached within ``max_steps``), and the temperature exceedance index
    ``k_t`` (-1 if none before ``k_v``).
    """
    n_hidden = vb1.shape[0]
    v_arr = np.empty(max_steps + 1)
    t_arr = np.empty(max_steps + 1)
    h1 = np.empty(n_hidden)
    h2 = np.empty(n_hidden)

    e0 = x0[0]
    e1 = x0[1]
    e2 = x0[2]
    t0 = x0[3]
    t1 = x0[4]

    k_v = -1
    k_t = -1
    n = 0
    for k in range(max_steps + 1):
        # Voltage head on (Vb, Vs, V1, Tcore, Tsurf, I).
        z0 = (e0 - vmean[0]) / vscale[0]
        z1 = (e1 - vmean[1]) / vscale[1]
        z2 = (e2 - vmean[2]) / vscale[2]
        z3 = (t0 - vmean[3]) / vscale[3]
        z4 = (t1 - vmean[4]) / vscale[4]
        z5 = (current - vmean[5]) / vscale[5]
        for j in range(n_hidden):
            h1[j] = _softplus(
                vw1[0, j] * z0
                + vw1[1, j] * z1
                + vw1[2, j] * z2
                + vw1[3, j] * z3
                + vw1[4, j] * z4
                + vw1[5, j] * z5
                + vb1[j]
            )
        for j in range(n_hidden):
            acc = vb2[j]
            for i in range(n_hidden):
                acc += vw2[i, j] * h1[i]
            h2[j] = _softplus(acc)
        v = vb3
        for i in range(n_hidden):
            v += vw3[i] * h2[i]

        # Temperature head on (Vb, Tcore, Tsurf).
        z0 = (e0 - tmean[0]) / tscale[0]
        z3 = (t0 - tmean[1]) / tscale[1]
        z4 = (t1 - tmean[2]) / tscale[2]
        for j in range(n_hidden):
            h1[j] = _softplus(tw1[0, j] * z0 + tw1[1, j] * z3 + tw1[2, j] * z4 + tb1[j])
        for j in range(n_hidden):
            acc = tb2[j]
            for i in range(n_hidden):
                acc += tw2[i, j] * h1[i]
            h2[j] = _softplus(acc)
        temp = tb3
        for i in range(n_hidden):
            temp += tw3[i] * h2[i]

        v_arr[k] = v
        t_arr[k] = temp
        n = k + 1
        if use_tmax and k_t < 0 and temp >= tmax:
            k_t = k
        if v < vmin:
            k_v = k
            break

        # Exact one-second state update.
        ne0 = m_e[0, 0] * e0 + m_e[0, 1] * e1 + m_e[0, 2] * e2 + c_e[0]
        ne1 = m_e[1, 0] * e0 + m_e[1, 1] * e1 + m_e[1, 2] * e2 + c_e[1]
        ne2 = m_e[2, 0] * e0 + m_e[2, 1] * e1 + m_e[2, 2] * e2 + c_e[2]
        nt0 = m_t[0, 0] * t0 + m_t[0, 1] * t1 + c_t[0]
        nt1 = m_t[1, 0] * t0 + m_t[1, 1] * t1 + c_t[1]
        e0, e1, e2, t0, t1 = ne0, ne1, ne2, nt0, nt1

    return v_arr[:n].copy(), t_arr[:n].copy(), k_v, k_t
