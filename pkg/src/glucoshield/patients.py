"""Virtual-patient parameter records, adaptations, and basal calibration.

A patient record starts as a baseline physiology row from the packaged
table, is globally tuned (sharper excursions), adapted to one diabetes
variant, and finally auto-balanced so the basal operating point is an
exact fixed point of the ODE system.
"""

import csv
import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import physiology
from .physiology import common as C

COHORTS = ("child", "adolescent", "adult")
DIABETES_TYPES = ("t1d", "t2d_pump", "t2d_no_pump")

GLOBAL_TUNING_FACTOR = 0.65
T1D_BASAL_PER_KG = 0.011       # U/h per kg body weight
T1D_CARB_SCALE = 2.0
T1D_VMX_SCALE = 0.8
T2D_BW_SCALE = 1.15
T2D_POOL_SCALE = 1.25
T2D_HEPATIC_SCALE = 0.85
T2D_PUMP_BETA = 0.25
T2D_PUMP_RESISTANCE = 2.5
T2D_NOPUMP_BETA = 0.30
T2D_NOPUMP_RESISTANCE = 2.8
T2D_NOPUMP_KDERIV = 30.0


class PatientLoadError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatientParams:
    id: str
    cohort: str
    diabetes_type: str
    age: float
    BW: float
    Gb: float
    Ib: float
    EGPb: float
    Vg: float
    Vi: float
    Gpb: float
    Gtb: float
    # gut
    k_gri: float
    k_min: float
    k_max: float
    k_abs: float
    f: float
    # glucose kinetics
    k1: float
    k2: float
    k_p1: float
    k_p2: float
    k_p3: float
    k_e1: float
    k_e2: float
    V_m0: float
    V_mx: float
    K_m0: float
    F_snc: float
    # insulin pharmacokinetics
    k_a1: float
    k_a2: float
    k_d: float
    m1: float
    m2: float
    m30: float
    m4: float
    # remote insulin action
    p_2u: float
    k_i: float
    s_i1: float
    s_i2: float
    s_i3: float
    k_act1: float
    k_act2: float
    k_act3: float
    # endogenous secretion
    S_b_kg: float
    alpha_s: float
    beta_s: float
    h_sec: float
    K_deriv: float
    tau_dG: float
    beta_cell: float
    # exercise
    tau_HR: float
    alpha_HR: float
    n_hill: float
    c1_ex: float
    c2_ex: float
    tau_ex: float
    tau_in: float
    beta_ex: float
    alpha_QE: float
    K_m_ex: float
    c_cap: float
    HR0: float
    # sensor
    k_sc: float
    # behavioral limits
    B_max: float
    M_max: float
    W_meal: float
    W_bolus: float
    max_meals_day: float
    max_boluses_day: float
    # therapy
    basal_rate: float
    # derived at adaptation time
    EGP0_mg: float = 0.0
    ib_ref: float = 0.0
    tuned: bool = False
    balanced: bool = False

    @property
    def hr_max(self) -> float:
        return 220.0 - self.age

    @property
    def kind(self) -> int:
        return C.KIND_T1D if self.diabetes_type == "t1d" else C.KIND_T2D


_STR_FIELDS = {"id", "cohort", "diabetes_type"}
_RUNTIME_FIELDS = {"EGP0_mg", "ib_ref", "tuned", "balanced"}
CSV_COLUMNS = [f.name for f in fields(PatientParams) if f.name not in _RUNTIME_FIELDS]

# Fields that must be strictly positive in a loaded record.
_POSITIVE_FIELDS = (
    "age", "BW", "Gb", "Ib", "EGPb", "Vg", "Vi", "Gpb", "Gtb",
    "k_gri", "k_min", "k_max", "k_abs",
    "k1", "k2", "k_p2", "k_p3", "k_e1", "k_e2", "V_m0", "K_m0",
    "k_a1", "k_a2", "k_d", "m1", "m2", "m30", "m4",
    "p_2u", "k_i", "s_i1", "s_i2", "s_i3", "k_act1", "k_act2", "k_act3",
    "alpha_s", "beta_s", "h_sec", "tau_dG",
    "tau_HR", "alpha_HR", "n_hill", "c1_ex", "c2_ex", "tau_ex", "tau_in",
    "alpha_QE", "K_m_ex", "c_cap", "HR0", "k_sc",
    "B_max", "M_max", "W_meal", "W_bolus", "max_meals_day", "max_boluses_day",
)


def default_table_path() -> Path:
    """Packaged patient table, overridable via GLUCO_DATA_DIR."""
    override = os.environ.get("GLUCO_DATA_DIR")
    if override:
        return Path(override) / "default_patients.csv"
    return Path(__file__).parent / "data" / "default_patients.csv"


def load_cohort(path=None) -> list:
    """Load and validate the patient parameter table."""
    path = Path(path) if path is not None else default_table_path()
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise PatientLoadError(f"{path}: empty patient table")
            missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
            if missing:
                raise PatientLoadError(f"{path}: missing columns {missing}")
            rows = list(reader)
    except OSError as exc:
        raise PatientLoadError(f"cannot read patient table {path}: {exc}") from exc
    if not rows:
        raise PatientLoadError(f"{path}: patient table has no records")

    patients = []
    for i, row in enumerate(rows):
        rec_id = row.get("id", f"row {i + 1}")
        kwargs = {}
        for name in CSV_COLUMNS:
            raw = row.get(name)
            if raw is None or raw == "":
                raise PatientLoadError(f"record {rec_id}: missing field {name!r}")
            if name in _STR_FIELDS:
                kwargs[name] = raw
            else:
                try:
                    kwargs[name] = float(raw)
                except ValueError as exc:
                    raise PatientLoadError(
                        f"record {rec_id}: field {name!r} is not numeric: {raw!r}"
                    ) from exc
        p = PatientParams(**kwargs)
        _validate(p)
        patients.append(p)
    return patients


def _validate(p: PatientParams):
    if p.cohort not in COHORTS:
        raise PatientLoadError(f"record {p.id}: unknown cohort {p.cohort!r}")
    for name in _POSITIVE_FIELDS:
        v = getattr(p, name)
        if not (v > 0.0) or not math.isfinite(v):
            raise PatientLoadError(f"record {p.id}: field {name!r} must be > 0, got {v}")
    if not (0.0 < p.f <= 1.0):
        raise PatientLoadError(f"record {p.id}: f must lie in (0, 1], got {p.f}")
    if p.basal_rate < 0.0:
        raise PatientLoadError(f"record {p.id}: basal_rate must be >= 0")
    if p.diabetes_type == "t1d" and (p.S_b_kg != 0.0 or p.beta_cell != 0.0):
        raise PatientLoadError(
            f"record {p.id}: t1d requires S_b_kg = 0 and beta_cell = 0"
        )


@dataclass(frozen=True)
class CohortStats:
    cohort: str
    n: int
    bw_mean: float
    bw_range: tuple
    gb_mean: float
    ib_mean: float
    egpb_mean: float
    vg_mean: float
    vi_mean: float


def cohort_stats(patients) -> dict:
    out = {}
    for cohort in COHORTS:
        members = [p for p in patients if p.cohort == cohort]
        if not members:
            continue
        bw = [p.BW for p in members]
        out[cohort] = CohortStats(
            cohort=cohort,
            n=len(members),
            bw_mean=float(np.mean(bw)),
            bw_range=(min(bw), max(bw)),
            gb_mean=float(np.mean([p.Gb for p in members])),
            ib_mean=float(np.mean([p.Ib for p in members])),
            egpb_mean=float(np.mean([p.EGPb for p in members])),
            vg_mean=float(np.mean([p.Vg for p in members])),
            vi_mean=float(np.mean([p.Vi for p in members])),
        )
    return out


def apply_global_tuning(p: PatientParams, factor: float = GLOBAL_TUNING_FACTOR):
    """Scale the glucose distribution volume and basal masses. One-shot."""
    if p.tuned:
        raise ValueError(f"record {p.id}: global tuning already applied")
    return replace(
        p, Vg=p.Vg * factor, Gpb=p.Gpb * factor, Gtb=p.Gtb * factor, tuned=True
    )


def pack(p: PatientParams) -> np.ndarray:
    """Flatten the record into the kernel parameter vector."""
    v = np.zeros(C.N_PARAM)
    v[C.P_BW] = p.BW
    v[C.P_AGE] = p.age
    v[C.P_FGUT] = p.f
    v[C.P_KGRI] = p.k_gri
    v[C.P_KMIN] = p.k_min
    v[C.P_KMAX] = p.k_max
    v[C.P_KABS] = p.k_abs
    v[C.P_K1] = p.k1
    v[C.P_K2] = p.k2
    v[C.P_KP1] = p.k_p1
    v[C.P_KP2] = p.k_p2
    v[C.P_KP3] = p.k_p3
    v[C.P_KE1] = p.k_e1
    v[C.P_KE2] = p.k_e2
    v[C.P_VM0] = p.V_m0
    v[C.P_VMX] = p.V_mx
    v[C.P_KM0] = p.K_m0
    v[C.P_FSNC] = p.F_snc
    v[C.P_VG] = p.Vg
    v[C.P_VI] = p.Vi
    v[C.P_KA1] = p.k_a1
    v[C.P_KA2] = p.k_a2
    v[C.P_KD] = p.k_d
    v[C.P_M1] = p.m1
    v[C.P_M2] = p.m2
    v[C.P_M30] = p.m30
    v[C.P_M4] = p.m4
    v[C.P_P2U] = p.p_2u
    v[C.P_KI] = p.k_i
    v[C.P_IBREF] = p.ib_ref
    v[C.P_SI1] = p.s_i1
    v[C.P_SI2] = p.s_i2
    v[C.P_SI3] = p.s_i3
    v[C.P_RA1] = p.k_act1
    v[C.P_RA2] = p.k_act2
    v[C.P_RA3] = p.k_act3
    v[C.P_SBKG] = p.S_b_kg
    v[C.P_ALPHAS] = p.alpha_s
    v[C.P_BETAS] = p.beta_s
    v[C.P_HSEC] = p.h_sec
    v[C.P_KDERIV] = p.K_deriv
    v[C.P_TAUDG] = p.tau_dG
    v[C.P_BETACELL] = p.beta_cell
    v[C.P_EGP0] = p.EGP0_mg
    v[C.P_TAUHR] = p.tau_HR
    v[C.P_ALPHAHR] = p.alpha_HR
    v[C.P_NHILL] = p.n_hill
    v[C.P_C1EX] = p.c1_ex
    v[C.P_C2EX] = p.c2_ex
    v[C.P_TAUEX] = p.tau_ex
    v[C.P_TAUIN] = p.tau_in
    v[C.P_BETAEX] = p.beta_ex
    v[C.P_ALPHAQE] = p.alpha_QE
    v[C.P_KMEX] = p.K_m_ex
    v[C.P_CCAP] = p.c_cap
    v[C.P_HR0] = p.HR0
    v[C.P_KSC] = p.k_sc
    return v


def basal_insulin_u_per_min(p: PatientParams) -> float:
    return p.basal_rate / 60.0


def _secretion_drive_basal(p: PatientParams) -> float:
    g_mmol = p.Gb / C.MGDL_PER_MMOLL
    return p.beta_s * max(g_mmol - p.h_sec, 0.0) / p.alpha_s


def _endog_flux(p: PatientParams, y_b: float) -> float:
    s_total = p.S_b_kg * p.BW + p.beta_cell * y_b
    return C.PMOL_PER_MU * s_total / p.BW


def _pk_equilibrium(p: PatientParams, basal_rate=None):
    """Steady-state insulin compartments under the basal infusion.

    Returns (Isc1, Isc2, Ip, Il) in pmol/kg.
    """
    rate = p.basal_rate if basal_rate is None else basal_rate
    iir = (rate / 60.0) * C.PMOL_PER_UNIT / p.BW
    isc1 = iir / (p.k_a1 + p.k_d)
    isc2 = p.k_d * isc1 / p.k_a2
    inflow = p.k_a1 * isc1 + p.k_a2 * isc2
    denom = (p.m2 + p.m4) - p.m1 * p.m2 / (p.m1 + p.m30)
    if denom <= 0.0:
        raise CalibrationError(
            f"record {p.id}: insulin kinetics have no stable equilibrium"
        )
    if p.kind == C.KIND_T2D:
        s_endog = _endog_flux(p, _secretion_drive_basal(p))
    else:
        s_endog = 0.0
    ip = (inflow + p.m1 * s_endog / (p.m1 + p.m30)) / denom
    il = (p.m2 * ip + s_endog) / (p.m1 + p.m30)
    return isc1, isc2, ip, il


def basal_state(p: PatientParams) -> np.ndarray:
    """Assemble the 18-component state at the basal operating point."""
    x = np.zeros(C.N_STATE)
    x[C.GP] = p.Gpb
    x[C.GT] = p.Gtb
    isc1, isc2, ip, il = _pk_equilibrium(p)
    x[C.ISC1] = isc1
    x[C.ISC2] = isc2
    x[C.IP] = ip
    x[C.IL] = il
    i_conc = ip / p.Vi
    if p.kind == C.KIND_T1D:
        x[C.X1] = i_conc - p.ib_ref
        x[C.X2] = i_conc
        x[C.X3] = i_conc
    else:
        i_mul = i_conc / C.PMOL_PER_MU
        x[C.X1] = p.s_i1 * i_mul / p.k_act1
        x[C.X2] = p.s_i2 * i_mul / p.k_act2
        x[C.X3] = p.s_i3 * i_mul / p.k_act3
        x[C.Y] = _secretion_drive_basal(p)
        x[C.GF] = p.Gb / C.MGDL_PER_MMOLL
    x[C.GSC] = p.Gpb
    x[C.TE] = p.c2_ex
    return x


def _basal_egp(p: PatientParams) -> float:
    """Endogenous production at the assembled basal state (unclipped)."""
    x = basal_state(p)
    if p.kind == C.KIND_T1D:
        return p.k_p1 - p.k_p2 * x[C.GP] - p.k_p3 * x[C.X3]
    x3_eff = min(max(x[C.X3], 0.0), 0.95)
    return p.EGP0_mg * (1.0 - x3_eff)


_BALANCE_BOUNDS = {
    "V_mx": (1e-6, 50.0),
    "offset": (1e-6, 50.0),
    "Gtb": (1.0, 5000.0),
}


def auto_balance(p: PatientParams, tol: float = 1e-10, max_iter: int = 200):
    """Recompute the insulin action slope and production offset so the
    basal operating point is an exact fixed point.

    Unknowns: V_mx, the production offset (k_p1 for the pump variant,
    EGP0 for the hybrid), and the basal tissue mass. Damped Newton on
    the residual (dGp, dGt, EGP - EGPb) evaluated through the actual
    derivative kernel.
    """
    if not p.tuned:
        raise ValueError(f"record {p.id}: apply global tuning before balancing")
    kind = p.kind
    offset_field = "k_p1" if kind == C.KIND_T1D else "EGP0_mg"
    u = physiology.make_input(ins=basal_insulin_u_per_min(p))

    def with_theta(theta):
        return replace(p, V_mx=theta[0], Gtb=theta[2], **{offset_field: theta[1]})

    def residual(theta):
        cand = with_theta(theta)
        x = basal_state(cand)
        d = physiology.derivatives(kind, x, u, pack(cand))
        return np.array([d[C.GP], d[C.GT], _basal_egp(cand) - cand.EGPb])

    theta = np.array([p.V_mx, getattr(p, offset_field), p.Gtb], dtype=float)
    if theta[1] <= 0.0:
        theta[1] = p.EGPb * (1.6 if kind == C.KIND_T2D else 1.0)
    r = residual(theta)
    iters = 0
    scale = np.array([max(abs(theta[0]), 0.05), max(abs(theta[1]), 1.0),
                      max(abs(theta[2]), 50.0)])
    while np.linalg.norm(r) > tol:
        if iters >= max_iter:
            raise CalibrationError(
                f"record {p.id}: balance did not converge "
                f"(residual {np.linalg.norm(r):.3e} after {max_iter} iterations)"
            )
        jac = np.empty((3, 3))
        for j in range(3):
            eps = 1e-7 * scale[j]
            bumped = theta.copy()
            bumped[j] += eps
            jac[:, j] = (residual(bumped) - r) / eps
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise CalibrationError(
                f"record {p.id}: singular balance system ({exc})"
            ) from exc
        lam = 1.0
        base_norm = np.linalg.norm(r)
        for _ in range(30):
            trial = theta + lam * step
            r_trial = residual(trial)
            if np.linalg.norm(r_trial) < base_norm:
                theta, r = trial, r_trial
                break
            lam *= 0.5
        else:
            raise CalibrationError(
                f"record {p.id}: balance stalled at residual {base_norm:.3e}"
            )
        iters += 1

    for value, (name, bounds) in zip(theta, (
        ("V_mx", _BALANCE_BOUNDS["V_mx"]),
        (offset_field, _BALANCE_BOUNDS["offset"]),
        ("Gtb", _BALANCE_BOUNDS["Gtb"]),
    )):
        lo, hi = bounds
        if not (lo <= value <= hi):
            raise CalibrationError(
                f"record {p.id}: infeasible calibration, {name} = {value:.4g} "
                f"outside [{lo:g}, {hi:g}]"
            )
    out = with_theta(theta)
    return replace(out, balanced=True)


def adapt_t1d(p: PatientParams, balance: bool = True):
    """Zero-secretion pump variant: doubled carb absorption, weight-based
    basal dosing, then steady-state balancing."""
    if not p.tuned:
        raise ValueError(f"record {p.id}: apply global tuning before adapting")
    q = replace(
        p,
        diabetes_type="t1d",
        S_b_kg=0.0,
        beta_cell=0.0,
        k_max=p.k_max * T1D_CARB_SCALE,
        k_abs=p.k_abs * T1D_CARB_SCALE,
        V_mx=p.V_mx * T1D_VMX_SCALE,
        basal_rate=T1D_BASAL_PER_KG * p.BW,
        ib_ref=p.Ib,
        EGP0_mg=0.0,
    )
    return auto_balance(q) if balance else q


def _solve_pump_basal(p: PatientParams, lo=0.0, hi=40.0, tol=1e-10):
    """Basal rate (U/h) whose plasma-insulin equilibrium hits Ib."""
    target = p.Ib * p.Vi

    def gap(rate):
        return _pk_equilibrium(p, basal_rate=rate)[2] - target

    if gap(lo) >= 0.0:
        return 0.0
    if gap(hi) < 0.0:
        raise CalibrationError(
            f"record {p.id}: basal solve bracket exhausted at {hi} U/h"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def adapt_t2d(p: PatientParams, pump: bool, balance: bool = True):
    """Hybrid variant: upscaled morphology, insulin resistance, residual
    secretion; pump mode solves a balancing basal rate, non-pump mode
    relies on secretion alone."""
    if not p.tuned:
        raise ValueError(f"record {p.id}: apply global tuning before adapting")
    beta = T2D_PUMP_BETA if pump else T2D_NOPUMP_BETA
    resistance = T2D_PUMP_RESISTANCE if pump else T2D_NOPUMP_RESISTANCE
    q = replace(
        p,
        diabetes_type="t2d_pump" if pump else "t2d_no_pump",
        BW=p.BW * T2D_BW_SCALE,
        Vi=p.Vi * T2D_POOL_SCALE,
        m30=p.m30 * T2D_HEPATIC_SCALE,
        F_snc=p.F_snc / T2D_BW_SCALE,
        beta_cell=beta,
        S_b_kg=p.S_b_kg * beta,
        s_i1=p.s_i1 / resistance,
        s_i2=p.s_i2 / resistance,
        s_i3=p.s_i3 / resistance,
        # resistance-matched therapy: dose ceilings scale with the
        # resistance factor so boluses stay clinically meaningful
        B_max=p.B_max * resistance,
        K_deriv=p.K_deriv if pump else T2D_NOPUMP_KDERIV,
        EGP0_mg=0.0,
        ib_ref=0.0,
    )
    if pump:
        q = replace(q, basal_rate=_solve_pump_basal(q))
    else:
        q = replace(q, basal_rate=0.0)
    return auto_balance(q) if balance else q


def prepare_patient(base: PatientParams, diabetes_type: str) -> PatientParams:
    """Full pipeline: tune, adapt, balance one baseline record."""
    if diabetes_type not in DIABETES_TYPES:
        raise ValueError(f"unknown diabetes type {diabetes_type!r}")
    tuned = apply_global_tuning(base)
    if diabetes_type == "t1d":
        return adapt_t1d(tuned)
    return adapt_t2d(tuned, pump=(diabetes_type == "t2d_pump"))


def get_patient(patient_id: str, diabetes_type: str, path=None) -> PatientParams:
    """Look a record up by id and run the preparation pipeline."""
    for base in load_cohort(path):
        if base.id == patient_id:
            return prepare_patient(base, diabetes_type)
    raise PatientLoadError(f"no patient record with id {patient_id!r}")
