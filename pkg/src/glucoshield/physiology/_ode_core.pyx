# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ODE kernels (hot path).

Expression-for-expression mirror of ``dynamics_py``; the parity test in
the suite keeps the two backends aligned. Index constants are literal
copies of ``common.py``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh, pow

cnp.import_array()

BACKEND_NAME = "compiled"

DEF N_STATE = 18
DEF N_INPUT = 5

# state indices
DEF D1 = 0
DEF D2 = 1
DEF D3 = 2
DEF GP = 3
DEF GT = 4
DEF X1 = 5
DEF X2 = 6
DEF X3 = 7
DEF IP = 8
DEF IL = 9
DEF ISC1 = 10
DEF ISC2 = 11
DEF GSC = 12
DEF E1 = 13
DEF TE = 14
DEF E2 = 15
DEF Y = 16
DEF GF = 17

# input indices
DEF U_CHO = 0
DEF U_INS = 1
DEF U_HR = 2
DEF U_DBAR = 3
DEF U_CIRC = 4

# parameter indices
DEF P_BW = 0
DEF P_AGE = 1
DEF P_FGUT = 2
DEF P_KGRI = 3
DEF P_KMIN = 4
DEF P_KMAX = 5
DEF P_KABS = 6
DEF P_K1 = 7
DEF P_K2 = 8
DEF P_KP1 = 9
DEF P_KP2 = 10
DEF P_KP3 = 11
DEF P_KE1 = 12
DEF P_KE2 = 13
DEF P_VM0 = 14
DEF P_VMX = 15
DEF P_KM0 = 16
DEF P_FSNC = 17
DEF P_VG = 18
DEF P_VI = 19
DEF P_KA1 = 20
DEF P_KA2 = 21
DEF P_KD = 22
DEF P_M1 = 23
DEF P_M2 = 24
DEF P_M30 = 25
DEF P_M4 = 26
DEF P_P2U = 27
DEF P_KI = 28
DEF P_IBREF = 29
DEF P_SI1 = 30
DEF P_SI2 = 31
DEF P_SI3 = 32
DEF P_RA1 = 33
DEF P_RA2 = 34
DEF P_RA3 = 35
DEF P_SBKG = 36
DEF P_ALPHAS = 37
DEF P_BETAS = 38
DEF P_HSEC = 39
DEF P_KDERIV = 40
DEF P_TAUDG = 41
DEF P_BETACELL = 42
DEF P_EGP0 = 43
DEF P_TAUHR = 44
DEF P_ALPHAHR = 45
DEF P_NHILL = 46
DEF P_C1EX = 47
DEF P_C2EX = 48
DEF P_TAUEX = 49
DEF P_TAUIN = 50
DEF P_BETAEX = 51
DEF P_ALPHAQE = 52
DEF P_KMEX = 53
DEF P_CCAP = 54
DEF P_HR0 = 55
DEF P_KSC = 56

DEF GUT_B = 0.82
DEF GUT_C = 0.010
DEF PMOL_PER_UNIT = 6000.0
DEF PMOL_PER_MU = 6.0
DEF MGDL_PER_MMOLL = 18.0
DEF TE_MIN = 1.0
DEF TE_MAX = 600.0


cdef inline double _nn(double x, double dx) nogil:
    if x <= 0.0 and dx < 0.0:
        return 0.0
    return dx


cdef void _derivs(int kind, double* x, const double* u, const double* p,
                  double* out) nogil:
    cdef double d1 = x[D1]
    cdef double d2 = x[D2]
    cdef double d3 = x[D3]
    cdef double gp = x[GP]
    cdef double gt = x[GT]
    cdef double x1 = x[X1]
    cdef double x2 = x[X2]
    cdef double x3 = x[X3]
    cdef double ip = x[IP]
    cdef double il = x[IL]
    cdef double isc1 = x[ISC1]
    cdef double isc2 = x[ISC2]
    cdef double gsc = x[GSC]
    cdef double e1 = x[E1]
    cdef double te = x[TE]
    cdef double e2 = x[E2]
    cdef double y = x[Y]
    cdef double gf = x[GF]

    cdef double cho = u[U_CHO]
    cdef double ins = u[U_INS]
    cdef double hr_rel = u[U_HR]
    cdef double d_bar = u[U_DBAR]
    cdef double circ_m1 = u[U_CIRC]

    cdef double bw = p[P_BW]

    cdef double q_sto = d1 + d2
    cdef double kgut, aa, cc
    if d_bar <= 0.0:
        kgut = p[P_KMAX]
    else:
        aa = 5.0 / (2.0 * d_bar * (1.0 - GUT_B))
        cc = 5.0 / (2.0 * d_bar * GUT_C)
        kgut = p[P_KMIN] + 0.5 * (p[P_KMAX] - p[P_KMIN]) * (
            tanh(aa * (q_sto - GUT_B * d_bar))
            - tanh(cc * (q_sto - GUT_C * d_bar))
            + 2.0
        )
    cdef double d_d1 = -p[P_KGRI] * d1 + 1000.0 * cho
    cdef double d_d2 = p[P_KGRI] * d1 - kgut * d2
    cdef double d_d3 = kgut * d2 - p[P_KABS] * d3
    cdef double ra = p[P_FGUT] * p[P_KABS] * d3 / bw

    cdef double hr0 = p[P_HR0]
    cdef double hr = hr_rel * ((220.0 - p[P_AGE]) - hr0) + hr0
    cdef double d_e1 = (hr - hr0 - e1) / p[P_TAUHR]
    cdef double z, f_e1
    if e1 > 0.0:
        z = pow(e1 / (p[P_ALPHAHR] * hr0), p[P_NHILL])
        f_e1 = z / (1.0 + z)
    else:
        f_e1 = 0.0
    cdef double te_safe = te if te > TE_MIN else TE_MIN
    cdef double d_te = (p[P_C1EX] * f_e1 + p[P_C2EX] - te) / p[P_TAUEX]
    cdef double d_e2 = -(f_e1 / p[P_TAUIN] + 1.0 / te_safe) * e2 + \
        f_e1 * te_safe / (p[P_C1EX] + p[P_C2EX])
    cdef double q_e1 = p[P_BETAEX] * (e1 if e1 > 0.0 else 0.0) / hr0
    cdef double vmax_ex = p[P_ALPHAQE] * e2 * e2
    cdef double s_p = vmax_ex * gp / (p[P_KMEX] + gp)
    cdef double s_t = vmax_ex * gt / (p[P_KMEX] + gt)
    cdef double cap_p = p[P_CCAP] * gp
    cdef double cap_t = p[P_CCAP] * gt
    cdef double q_e21 = s_p if s_p < cap_p else cap_p
    cdef double q_e22 = s_t if s_t < cap_t else cap_t

    cdef double iir = ins * PMOL_PER_UNIT / bw
    cdef double d_isc1 = -(p[P_KA1] + p[P_KD]) * isc1 + iir
    cdef double d_isc2 = p[P_KD] * isc1 - p[P_KA2] * isc2
    cdef double d_ip = -(p[P_M2] + p[P_M4]) * ip + p[P_M1] * il + \
        p[P_KA1] * isc1 + p[P_KA2] * isc2
    cdef double d_il = -(p[P_M1] + p[P_M30]) * il + p[P_M2] * ip
    cdef double i_conc = ip / p[P_VI]

    cdef double d_x1, d_x2, d_x3, egp, r_circ, vm, d_y, d_gf
    cdef double g_mmol, excess, s_total, i_mul, x3_eff
    if kind == 0:
        d_x1 = -p[P_P2U] * x1 + p[P_P2U] * (i_conc - p[P_IBREF])
        d_x2 = -p[P_KI] * (x2 - i_conc)
        d_x3 = -p[P_KI] * (x3 - x2)
        egp = p[P_KP1] - p[P_KP2] * gp - p[P_KP3] * x3
        if egp < 0.0:
            egp = 0.0
        r_circ = circ_m1 * p[P_KP1]
        vm = p[P_VM0] + p[P_VMX] * x1
        d_y = 0.0
        d_gf = 0.0
    else:
        g_mmol = gp / p[P_VG] / MGDL_PER_MMOLL
        d_gf = (g_mmol - gf) / p[P_TAUDG]
        excess = g_mmol - p[P_HSEC]
        d_y = -p[P_ALPHAS] * y + \
            p[P_BETAS] * (excess if excess > 0.0 else 0.0) + \
            p[P_KDERIV] * (d_gf if d_gf > 0.0 else 0.0)
        s_total = p[P_SBKG] * bw + p[P_BETACELL] * y
        d_il = d_il + PMOL_PER_MU * s_total / bw
        i_mul = i_conc / PMOL_PER_MU
        d_x1 = -p[P_RA1] * x1 + p[P_SI1] * i_mul
        d_x2 = -p[P_RA2] * x2 + p[P_SI2] * i_mul
        d_x3 = -p[P_RA3] * x3 + p[P_SI3] * i_mul
        x3_eff = x3
        if x3_eff < 0.0:
            x3_eff = 0.0
        elif x3_eff > 0.95:
            x3_eff = 0.95
        egp = p[P_EGP0] * (1.0 - x3_eff)
        if egp < 0.0:
            egp = 0.0
        r_circ = circ_m1 * p[P_EGP0] * (1.0 - x3_eff)
        vm = p[P_VM0] + p[P_VMX] * (x1 + x2)

    cdef double renal
    if gp > p[P_KE2]:
        renal = p[P_KE1] * (gp - p[P_KE2])
    else:
        renal = 0.0
    if vm < 0.0:
        vm = 0.0
    cdef double uid = vm * gt / (p[P_KM0] + gt)

    cdef double d_gp = egp + ra - p[P_FSNC] - renal - p[P_K1] * gp + \
        p[P_K2] * gt - q_e21 + r_circ
    cdef double d_gt = p[P_K1] * gp - p[P_K2] * gt - uid - q_e1 - q_e22
    cdef double d_gsc = -p[P_KSC] * gsc + p[P_KSC] * gp

    out[D1] = d_d1
    out[D2] = d_d2
    out[D3] = d_d3
    out[GP] = _nn(gp, d_gp)
    out[GT] = _nn(gt, d_gt)
    out[X1] = d_x1
    out[X2] = d_x2
    out[X3] = d_x3
    out[IP] = _nn(ip, d_ip)
    out[IL] = _nn(il, d_il)
    out[ISC1] = _nn(isc1, d_isc1)
    out[ISC2] = _nn(isc2, d_isc2)
    out[GSC] = _nn(gsc, d_gsc)
    out[E1] = d_e1
    out[TE] = d_te
    out[E2] = d_e2
    out[Y] = d_y
    out[GF] = d_gf


cdef void _project(double* x) nogil:
    # guarded states: Gp, Gt, Ip, Il, Isc1, Isc2, Gsc
    cdef int idx
    cdef int[7] guarded = [GP, GT, IP, IL, ISC1, ISC2, GSC]
    for i in range(7):
        idx = guarded[i]
        if x[idx] < 0.0:
            x[idx] = 0.0
    if x[TE] < TE_MIN:
        x[TE] = TE_MIN
    elif x[TE] > TE_MAX:
        x[TE] = TE_MAX


cdef void _rk4_minute(int kind, double* x, const double* u, const double* p,
                      double dt) nogil:
    cdef double k1[N_STATE]
    cdef double k2[N_STATE]
    cdef double k3[N_STATE]
    cdef double k4[N_STATE]
    cdef double tmp[N_STATE]
    cdef int i

    _derivs(kind, x, u, p, k1)
    for i in range(N_STATE):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _derivs(kind, tmp, u, p, k2)
    for i in range(N_STATE):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _derivs(kind, tmp, u, p, k3)
    for i in range(N_STATE):
        tmp[i] = x[i] + dt * k3[i]
    _derivs(kind, tmp, u, p, k4)

    for i in range(N_STATE):
        x[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    _project(x)


def derivs(int kind, cnp.ndarray[double, ndim=1] x,
           cnp.ndarray[double, ndim=1] u,
           cnp.ndarray[double, ndim=1] p,
           cnp.ndarray[double, ndim=1] out):
    _derivs(kind, &x[0], &u[0], &p[0], &out[0])
    return out


def rk4_minute(int kind, cnp.ndarray[double, ndim=1] x,
               cnp.ndarray[double, ndim=1] u,
               cnp.ndarray[double, ndim=1] p,
               double dt=1.0):
    cdef cnp.ndarray[double, ndim=1] cur = np.array(x, dtype=np.float64)
    _rk4_minute(kind, &cur[0], &u[0], &p[0], dt)
    return cur


def integrate_minutes(int kind, cnp.ndarray[double, ndim=1] x,
                      cnp.ndarray[double, ndim=2] u_rows,
                      cnp.ndarray[double, ndim=1] gp_noise,
                      cnp.ndarray[double, ndim=1] p):
    cdef cnp.ndarray[double, ndim=1] cur = np.array(x, dtype=np.float64)
    cdef int n = u_rows.shape[0]
    cdef int j
    for j in range(n):
        _rk4_minute(kind, &cur[0], &u_rows[j, 0], &p[0], 1.0)
        cur[GP] += gp_noise[j]
        if cur[GP] < 0.0:
            cur[GP] = 0.0
    return cur
