"""Pure-Python ODE kernels (fallback backend).

Mirrors the compiled extension in `_ode_core.pyx` expression for
expression; the parity test pins the two together. Scalar Python floats
are used instead of numpy vector ops because the state is small (18
components) and per-call overhead dominates.
"""

import math

import numpy as np

from . import common as C

BACKEND_NAME = "python"


def _kgut(q_sto: float, d_bar: float, k_min: float, k_max: float) -> float:
    if d_bar <= 0.0:
        return k_max
    aa = 5.0 / (2.0 * d_bar * (1.0 - C.GUT_B))
    cc = 5.0 / (2.0 * d_bar * C.GUT_C)
    return k_min + 0.5 * (k_max - k_min) * (
        math.tanh(aa * (q_sto - C.GUT_B * d_bar))
        - math.tanh(cc * (q_sto - C.GUT_C * d_bar))
        + 2.0
    )


def _nn(x: float, dx: float) -> float:
    if x <= 0.0 and dx < 0.0:
        return 0.0
    return dx


def derivs(kind, x, u, p, out):
    """Time derivative of the 18-state vector. Writes into ``out``.

    ``kind`` selects the variant (0 = no endogenous secretion, single
    delayed-action chain; 1 = hybrid with secretion and three parallel
    insulin-effect states).
    """
    d1 = x[C.D1]
    d2 = x[C.D2]
    d3 = x[C.D3]
    gp = x[C.GP]
    gt = x[C.GT]
    x1 = x[C.X1]
    x2 = x[C.X2]
    x3 = x[C.X3]
    ip = x[C.IP]
    il = x[C.IL]
    isc1 = x[C.ISC1]
    isc2 = x[C.ISC2]
    gsc = x[C.GSC]
    e1 = x[C.E1]
    te = x[C.TE]
    e2 = x[C.E2]
    y = x[C.Y]
    gf = x[C.GF]

    cho = u[C.U_CHO]
    ins = u[C.U_INS]
    hr_rel = u[C.U_HR]
    d_bar = u[C.U_DBAR]
    circ_m1 = u[C.U_CIRC]

    bw = p[C.P_BW]

    # Gut: two stomach compartments and one intestine.
    q_sto = d1 + d2
    kgut = _kgut(q_sto, d_bar, p[C.P_KMIN], p[C.P_KMAX])
    d_d1 = -p[C.P_KGRI] * d1 + 1000.0 * cho
    d_d2 = p[C.P_KGRI] * d1 - kgut * d2
    d_d3 = kgut * d2 - p[C.P_KABS] * d3
    ra = p[C.P_FGUT] * p[C.P_KABS] * d3 / bw

    # Exercise filter states and insulin-independent disposal shunts.
    hr0 = p[C.P_HR0]
    hr = hr_rel * ((220.0 - p[C.P_AGE]) - hr0) + hr0
    d_e1 = (hr - hr0 - e1) / p[C.P_TAUHR]
    if e1 > 0.0:
        z = (e1 / (p[C.P_ALPHAHR] * hr0)) ** p[C.P_NHILL]
        f_e1 = z / (1.0 + z)
    else:
        f_e1 = 0.0
    te_safe = te if te > C.TE_MIN else C.TE_MIN
    d_te = (p[C.P_C1EX] * f_e1 + p[C.P_C2EX] - te) / p[C.P_TAUEX]
    d_e2 = -(f_e1 / p[C.P_TAUIN] + 1.0 / te_safe) * e2 + f_e1 * te_safe / (
        p[C.P_C1EX] + p[C.P_C2EX]
    )
    q_e1 = p[C.P_BETAEX] * (e1 if e1 > 0.0 else 0.0) / hr0
    vmax_ex = p[C.P_ALPHAQE] * e2 * e2
    s_p = vmax_ex * gp / (p[C.P_KMEX] + gp)
    s_t = vmax_ex * gt / (p[C.P_KMEX] + gt)
    cap_p = p[C.P_CCAP] * gp
    cap_t = p[C.P_CCAP] * gt
    q_e21 = s_p if s_p < cap_p else cap_p
    q_e22 = s_t if s_t < cap_t else cap_t

    # Subcutaneous insulin absorption and plasma/liver recycling.
    iir = ins * C.PMOL_PER_UNIT / bw
    d_isc1 = -(p[C.P_KA1] + p[C.P_KD]) * isc1 + iir
    d_isc2 = p[C.P_KD] * isc1 - p[C.P_KA2] * isc2
    d_ip = (
        -(p[C.P_M2] + p[C.P_M4]) * ip
        + p[C.P_M1] * il
        + p[C.P_KA1] * isc1
        + p[C.P_KA2] * isc2
    )
    d_il = -(p[C.P_M1] + p[C.P_M30]) * il + p[C.P_M2] * ip
    i_conc = ip / p[C.P_VI]

    if kind == C.KIND_T1D:
        d_x1 = -p[C.P_P2U] * x1 + p[C.P_P2U] * (i_conc - p[C.P_IBREF])
        d_x2 = -p[C.P_KI] * (x2 - i_conc)
        d_x3 = -p[C.P_KI] * (x3 - x2)
        egp = p[C.P_KP1] - p[C.P_KP2] * gp - p[C.P_KP3] * x3
        if egp < 0.0:
            egp = 0.0
        r_circ = circ_m1 * p[C.P_KP1]
        vm = p[C.P_VM0] + p[C.P_VMX] * x1
        d_y = 0.0
        d_gf = 0.0
    else:
        g_mmol = gp / p[C.P_VG] / C.MGDL_PER_MMOLL
        d_gf = (g_mmol - gf) / p[C.P_TAUDG]
        excess = g_mmol - p[C.P_HSEC]
        d_y = (
            -p[C.P_ALPHAS] * y
            + p[C.P_BETAS] * (excess if excess > 0.0 else 0.0)
            + p[C.P_KDERIV] * (d_gf if d_gf > 0.0 else 0.0)
        )
        s_total = p[C.P_SBKG] * bw + p[C.P_BETACELL] * y
        d_il = d_il + C.PMOL_PER_MU * s_total / bw
        i_mul = i_conc / C.PMOL_PER_MU
        d_x1 = -p[C.P_RA1] * x1 + p[C.P_SI1] * i_mul
        d_x2 = -p[C.P_RA2] * x2 + p[C.P_SI2] * i_mul
        d_x3 = -p[C.P_RA3] * x3 + p[C.P_SI3] * i_mul
        x3_eff = x3
        if x3_eff < 0.0:
            x3_eff = 0.0
        elif x3_eff > 0.95:
            x3_eff = 0.95
        egp = p[C.P_EGP0] * (1.0 - x3_eff)
        if egp < 0.0:
            egp = 0.0
        r_circ = circ_m1 * p[C.P_EGP0] * (1.0 - x3_eff)
        vm = p[C.P_VM0] + p[C.P_VMX] * (x1 + x2)

    # Renal excretion above threshold, Michaelis-Menten utilization.
    if gp > p[C.P_KE2]:
        renal = p[C.P_KE1] * (gp - p[C.P_KE2])
    else:
        renal = 0.0
    if vm < 0.0:
        vm = 0.0
    uid = vm * gt / (p[C.P_KM0] + gt)

    d_gp = egp + ra - p[C.P_FSNC] - renal - p[C.P_K1] * gp + p[C.P_K2] * gt - q_e21 + r_circ
    d_gt = p[C.P_K1] * gp - p[C.P_K2] * gt - uid - q_e1 - q_e22
    d_gsc = -p[C.P_KSC] * gsc + p[C.P_KSC] * gp

    out[C.D1] = d_d1
    out[C.D2] = d_d2
    out[C.D3] = d_d3
    out[C.GP] = _nn(gp, d_gp)
    out[C.GT] = _nn(gt, d_gt)
    out[C.X1] = d_x1
    out[C.X2] = d_x2
    out[C.X3] = d_x3
    out[C.IP] = _nn(ip, d_ip)
    out[C.IL] = _nn(il, d_il)
    out[C.ISC1] = _nn(isc1, d_isc1)
    out[C.ISC2] = _nn(isc2, d_isc2)
    out[C.GSC] = _nn(gsc, d_gsc)
    out[C.E1] = d_e1
    out[C.TE] = d_te
    out[C.E2] = d_e2
    out[C.Y] = d_y
    out[C.GF] = d_gf
    return out


def project(x):
    """Clamp guarded states to >= 0 and TE to its valid range, in place."""
    for i in C.GUARDED:
        if x[i] < 0.0:
            x[i] = 0.0
    if x[C.TE] < C.TE_MIN:
        x[C.TE] = C.TE_MIN
    elif x[C.TE] > C.TE_MAX:
        x[C.TE] = C.TE_MAX
    return x


def rk4_minute(kind, x, u, p, dt=1.0):
    """One classic RK4 step of the physiological system plus projection."""
    n = C.N_STATE
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)

    derivs(kind, x, u, p, k1)
    for i in range(n):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    derivs(kind, tmp, u, p, k2)
    for i in range(n):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    derivs(kind, tmp, u, p, k3)
    for i in range(n):
        tmp[i] = x[i] + dt * k3[i]
    derivs(kind, tmp, u, p, k4)

    out = np.empty(n)
    for i in range(n):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return project(out)


def integrate_minutes(kind, x, u_rows, gp_noise, p):
    """Integrate ``n`` one-minute RK4 steps.

    ``u_rows``: (n, 5) per-minute inputs. ``gp_noise``: (n,) additive
    plasma-glucose increments (mg/kg) injected after each minute.
    Returns the final state (a new array).
    """
    cur = np.array(x, dtype=float)
    n = u_rows.shape[0]
    for j in range(n):
        cur = rk4_minute(kind, cur, u_rows[j], p)
        cur[C.GP] += gp_noise[j]
        if cur[C.GP] < 0.0:
            cur[C.GP] = 0.0
    return cur
