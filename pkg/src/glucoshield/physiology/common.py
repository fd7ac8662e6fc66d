"""Shared layout of the ODE state and parameter vectors.

Both the compiled and the pure-Python kernels operate on flat float64
arrays; the index constants below are the single source of truth for
their meaning. Keep this file free of heavy imports: it is loaded by
the Cython module at build time via literal copies of these values.
"""

# --- state vector (18 components) -------------------------------------
D1 = 0    # solid stomach carbohydrate mass (mg)
D2 = 1    # liquid stomach carbohydrate mass (mg)
D3 = 2    # intestine carbohydrate mass (mg)
GP = 3    # plasma glucose mass (mg/kg)
GT = 4    # tissue glucose mass (mg/kg)
X1 = 5    # remote insulin action 1
X2 = 6    # remote insulin action 2
X3 = 7    # remote insulin action 3
IP = 8    # plasma insulin (pmol/kg)
IL = 9    # liver insulin (pmol/kg)
ISC1 = 10  # subcutaneous insulin depot 1 (pmol/kg)
ISC2 = 11  # subcutaneous insulin depot 2 (pmol/kg)
GSC = 12   # subcutaneous glucose (mg/kg)
E1 = 13    # filtered excess heart rate (bpm)
TE = 14    # dynamic exercise time constant (min)
E2 = 15    # accumulated exercise intensity
Y = 16     # endogenous secretion drive (mU/min)
GF = 17    # filtered glucose (mmol/L)

N_STATE = 18

STATE_NAMES = (
    "D1", "D2", "D3", "Gp", "Gt", "x1", "x2", "x3",
    "Ip", "Il", "Isc1", "Isc2", "Gsc", "E1", "TE", "E2", "Y", "Gf",
)

# States projected to >= 0 after every integration step and whose
# derivatives pass through the non-negativity guard.
GUARDED = (GP, GT, IP, IL, ISC1, ISC2, GSC)

TE_MIN = 1.0
TE_MAX = 600.0

# --- per-minute input vector (5 components) ----------------------------
U_CHO = 0      # carbohydrate inflow (g/min)
U_INS = 1      # exogenous insulin (U/min)
U_HR = 2       # relative heart-rate intensity in [0, 1]
U_DBAR = 3     # glucose mass of the most recent meal (mg); gastric-emptying scale
U_CIRC = 4     # circadian factor minus one, c(t) - 1

N_INPUT = 5

# --- parameter vector ---------------------------------------------------
P_BW = 0
P_AGE = 1
P_FGUT = 2
P_KGRI = 3
P_KMIN = 4
P_KMAX = 5
P_KABS = 6
P_K1 = 7
P_K2 = 8
P_KP1 = 9
P_KP2 = 10
P_KP3 = 11
P_KE1 = 12
P_KE2 = 13
P_VM0 = 14
P_VMX = 15
P_KM0 = 16
P_FSNC = 17
P_VG = 18
P_VI = 19
P_KA1 = 20
P_KA2 = 21
P_KD = 22
P_M1 = 23
P_M2 = 24
P_M30 = 25
P_M4 = 26
P_P2U = 27
P_KI = 28
P_IBREF = 29
P_SI1 = 30
P_SI2 = 31
P_SI3 = 32
P_RA1 = 33
P_RA2 = 34
P_RA3 = 35
P_SBKG = 36
P_ALPHAS = 37
P_BETAS = 38
P_HSEC = 39
P_KDERIV = 40
P_TAUDG = 41
P_BETACELL = 42
P_EGP0 = 43
P_TAUHR = 44
P_ALPHAHR = 45
P_NHILL = 46
P_C1EX = 47
P_C2EX = 48
P_TAUEX = 49
P_TAUIN = 50
P_BETAEX = 51
P_ALPHAQE = 52
P_KMEX = 53
P_CCAP = 54
P_HR0 = 55
P_KSC = 56

N_PARAM = 57

# Gastric emptying interpolation anchors (fraction of the last meal mass
# at which emptying leaves k_max / rejoins k_min).
GUT_B = 0.82
GUT_C = 0.010

# 1 U of insulin = 6000 pmol; 1 mU/L = 6 pmol/L.
PMOL_PER_UNIT = 6000.0
PMOL_PER_MU = 6.0
MGDL_PER_MMOLL = 18.0

KIND_T1D = 0
KIND_T2D = 1
