#!/usr/bin/env python3
"""Generate the packaged 30-patient baseline table.

Samples per-cohort morphology and basal physiology around the published
cohort statistics (means adjusted to hit the targets exactly), fills the
remaining rate constants with compartmental-model literature defaults
plus per-patient jitter, and rejects any draw for which the preparation
pipeline (tuning, adaptation, steady-state balancing) fails for any
diabetes variant.

Usage: python tools/generate_patient_table.py [--out PATH] [--seed N]
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from glucoshield import patients as pt  # noqa: E402
from glucoshield import physiology as ph  # noqa: E402
from glucoshield.physiology import common as C  # noqa: E402

COHORT_TARGETS = {
    # bw_range, bw_mean, gb_mean, ib_mean, egpb_mean, vg_mean, vi_mean, hr0, age
    "child": dict(bw=(23.7, 45.5, 35.9), gb=139.0, ib=107.0, egpb=2.96,
                  vg=1.86, vi=0.056, hr0=85.0, age=(7.0, 12.0)),
    "adolescent": dict(bw=(37.9, 68.7, 47.7), gb=144.0, ib=104.0, egpb=2.70,
                       vg=1.855, vi=0.053, hr0=75.0, age=(13.0, 18.0)),
    "adult": dict(bw=(63.0, 111.1, 86.1), gb=143.0, ib=108.0, egpb=2.51,
                  vg=1.85, vi=0.051, hr0=70.0, age=(25.0, 65.0)),
}

N_PER_COHORT = 10

BEHAVIOR = {
    "child": dict(b_max=5.0, m_max=60.0),
    "adolescent": dict(b_max=7.0, m_max=75.0),
    "adult": dict(b_max=10.0, m_max=90.0),
}


def adjust_mean(values, target, lo, hi):
    """Shift/clip samples so the mean hits the target exactly."""
    values = np.clip(np.asarray(values, dtype=float), lo, hi)
    for _ in range(200):
        shift = target - values.mean()
        if abs(shift) < 1e-12:
            break
        values = np.clip(values + shift, lo, hi)
    return values


def jitter(rng, scale=0.10):
    return 1.0 + rng.uniform(-scale, scale)


def sample_insulin_pk(rng, vi, ib):
    """Draw plasma/liver exchange rates so the pump-variant basal
    infusion settles a bit above the reported basal insulin."""
    iir = 0.011 * 100.0  # pmol/kg/min, independent of body weight
    for _ in range(500):
        m1 = rng.uniform(0.15, 0.21)
        m2 = rng.uniform(0.22, 0.30)
        m30 = rng.uniform(0.20, 0.30)
        delta = rng.uniform(15.0, 35.0)
        denom_needed = iir / (vi * (ib + delta))
        m4 = denom_needed + m1 * m2 / (m1 + m30) - m2
        if 0.01 <= m4 <= 0.40:
            return m1, m2, m30, m4
    raise RuntimeError("could not find feasible insulin kinetics")


def sample_record(rng, cohort, idx, bw, gb, ib, egpb, vg, vi, age):
    t = COHORT_TARGETS[cohort]
    beh = BEHAVIOR[cohort]
    m1, m2, m30, m4 = sample_insulin_pk(rng, vi, ib)
    k_max = 0.047 * jitter(rng)
    gpb = gb * vg
    rec = dict(
        id=f"{cohort}#{idx:02d}",
        cohort=cohort,
        diabetes_type="base",
        age=round(age, 1),
        BW=bw,
        Gb=gb,
        Ib=ib,
        EGPb=egpb,
        Vg=vg,
        Vi=vi,
        Gpb=gpb,
        Gtb=0.75 * gpb,
        k_gri=k_max,
        k_min=0.0076 * jitter(rng),
        k_max=k_max,
        k_abs=0.057 * jitter(rng),
        f=0.90,
        k1=0.065 * jitter(rng),
        k2=0.079 * jitter(rng),
        k_p1=egpb * 2.0,
        k_p2=0.0021 * jitter(rng),
        k_p3=0.009 * jitter(rng),
        k_e1=0.0005,
        k_e2=339.0,
        V_m0=2.5 * jitter(rng),
        V_mx=0.06,
        K_m0=225.59 * jitter(rng),
        F_snc=1.0,
        k_a1=0.0018 * jitter(rng),
        k_a2=0.0182 * jitter(rng),
        k_d=0.0164 * jitter(rng),
        m1=m1,
        m2=m2,
        m30=m30,
        m4=m4,
        p_2u=0.033 * jitter(rng),
        k_i=0.0079 * jitter(rng),
        s_i1=5.0e-4 * jitter(rng, 0.2),
        s_i2=1.2e-3 * jitter(rng, 0.2),
        s_i3=1.7e-3 * jitter(rng, 0.2),
        k_act1=0.006 * jitter(rng),
        k_act2=0.06 * jitter(rng),
        k_act3=0.03 * jitter(rng),
        S_b_kg=0.20 * jitter(rng),
        alpha_s=0.05,
        beta_s=0.8 * jitter(rng),
        h_sec=5.0,
        K_deriv=10.0,
        tau_dG=10.0,
        beta_cell=1.0,
        tau_HR=5.0,
        alpha_HR=0.1,
        n_hill=4.0,
        c1_ex=500.0,
        c2_ex=100.0,
        tau_ex=60.0,
        tau_in=1.0,
        beta_ex=2.0 * jitter(rng),
        alpha_QE=0.5 * jitter(rng),
        K_m_ex=250.0,
        c_cap=0.015,
        HR0=t["hr0"] * jitter(rng, 0.05),
        k_sc=0.1 * jitter(rng),
        B_max=beh["b_max"] * jitter(rng, 0.15),
        M_max=beh["m_max"] * jitter(rng, 0.15),
        W_meal=60.0,
        W_bolus=60.0,
        max_meals_day=7.0,
        max_boluses_day=8.0,
        basal_rate=0.0,
    )
    return rec


def record_feasible(rec):
    """Run the full preparation pipeline for every variant and check
    the balanced equilibrium holds over a quiet day."""
    base = pt.PatientParams(**rec)
    for dtype in pt.DIABETES_TYPES:
        try:
            p = pt.prepare_patient(base, dtype)
        except (pt.CalibrationError, ValueError) as exc:
            return False, f"{dtype}: {exc}"
        x = pt.basal_state(p)
        pvec = pt.pack(p)
        u = ph.make_input(ins=pt.basal_insulin_u_per_min(p))
        d = ph.derivatives(p.kind, x, u, pvec)
        if max(abs(d[C.GP]), abs(d[C.GT])) > 1e-8:
            return False, f"{dtype}: residual {d[C.GP]:.2e}/{d[C.GT]:.2e}"
        # 24 h quiet drift
        rows = np.tile(u, (1440, 1))
        final = ph.step_minutes(p.kind, x, rows, np.zeros(1440), pvec)
        drift = abs(final[C.GP] - x[C.GP]) / p.Vg
        if drift > 0.5:
            return False, f"{dtype}: 24h drift {drift:.3f} mg/dL"
        if p.V_mx <= 0.0:
            return False, f"{dtype}: non-positive V_mx {p.V_mx:.4g}"
    return True, ""


def generate(seed):
    rng = np.random.default_rng(seed)
    records = []
    for cohort, t in COHORT_TARGETS.items():
        lo, hi, mean = t["bw"]
        bw = adjust_mean(rng.uniform(lo, hi, N_PER_COHORT), mean, lo, hi)
        gb = adjust_mean(rng.normal(t["gb"], 4.0, N_PER_COHORT),
                         t["gb"], t["gb"] - 9.0, t["gb"] + 9.0)
        ib = adjust_mean(rng.normal(t["ib"], 6.0, N_PER_COHORT),
                         t["ib"], t["ib"] - 13.0, t["ib"] + 13.0)
        egpb = adjust_mean(rng.normal(t["egpb"], 0.12, N_PER_COHORT),
                           t["egpb"], t["egpb"] - 0.3, t["egpb"] + 0.3)
        vg = adjust_mean(rng.normal(t["vg"], 0.015, N_PER_COHORT),
                         t["vg"], 1.80, 1.92)
        vi = adjust_mean(rng.normal(t["vi"], 0.0015, N_PER_COHORT),
                         t["vi"], t["vi"] - 0.004, t["vi"] + 0.004)
        ages = rng.uniform(t["age"][0], t["age"][1], N_PER_COHORT)
        for i in range(N_PER_COHORT):
            for attempt in range(50):
                rec = sample_record(rng, cohort, i + 1, bw[i], gb[i], ib[i],
                                    egpb[i], vg[i], vi[i], ages[i])
                ok, why = record_feasible(rec)
                if ok:
                    break
                print(f"  resample {rec['id']} (attempt {attempt + 1}): {why}")
            else:
                raise RuntimeError(f"no feasible draw for {cohort}#{i + 1:02d}")
            records.append(rec)
            print(f"  {rec['id']} ok")
    return records


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                         / "src/glucoshield/data/default_patients.csv"))
    ap.add_argument("--seed", type=int, default=20260810)
    args = ap.parse_args()

    records = generate(args.seed)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=pt.CSV_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: (rec[k] if k in ("id", "cohort", "diabetes_type")
                                 else repr(float(rec[k]))) for k in pt.CSV_COLUMNS})
    print(f"wrote {len(records)} records to {args.out}")

    loaded = pt.load_cohort(args.out)
    for cohort, st in pt.cohort_stats(loaded).items():
        print(f"{cohort}: BW mean {st.bw_mean:.2f} range {st.bw_range}, "
              f"Gb {st.gb_mean:.1f}, Ib {st.ib_mean:.1f}, EGPb {st.egpb_mean:.3f}, "
              f"Vg {st.vg_mean:.3f}, Vi {st.vi_mean:.4f}")


if __name__ == "__main__":
    main()
