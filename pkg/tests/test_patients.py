import numpy as np
import pytest

from glucoshield import patients as pt
from glucoshield import physiology as ph
from glucoshield.physiology import common as C
from glucoshield.physiology import sensor as sn


@pytest.fixture(scope="module")
def cohort():
    return pt.load_cohort()


@pytest.fixture(scope="module")
def stats(cohort):
    return pt.cohort_stats(cohort)


class TestLoadCohort:
    def test_default_table_size(self, cohort):
        assert len(cohort) == 30
        for name in pt.COHORTS:
            assert sum(p.cohort == name for p in cohort) == 10

    def test_child_bw_mean_and_range(self, stats):
        st = stats["child"]
        assert st.bw_mean == pytest.approx(35.9, abs=0.05)
        assert 23.7 <= st.bw_range[0] and st.bw_range[1] <= 45.5

    def test_adult_egpb_mean(self, stats):
        assert stats["adult"].egpb_mean == pytest.approx(2.51, abs=0.02)

    def test_published_cohort_statistics(self, stats):
        expect = {
            "child": dict(bw=35.9, gb=139.0, ib=107.0, egpb=2.96),
            "adolescent": dict(bw=47.7, gb=144.0, ib=104.0),
            "adult": dict(bw=86.1, gb=143.0, ib=108.0, egpb=2.51),
        }
        for name, targets in expect.items():
            st = stats[name]
            assert st.bw_mean == pytest.approx(targets["bw"], abs=0.05)
            assert st.gb_mean == pytest.approx(targets["gb"], abs=0.5)
            assert st.ib_mean == pytest.approx(targets["ib"], abs=0.5)
            if "egpb" in targets:
                assert st.egpb_mean == pytest.approx(targets["egpb"], abs=0.02)
            assert 1.84 <= st.vg_mean <= 1.87
            assert 0.050 <= st.vi_mean <= 0.057

    def test_empty_file_rejected(self, tmp_path):
        empty = tmp_path / "patients.csv"
        empty.write_text("")
        with pytest.raises(pt.PatientLoadError):
            pt.load_cohort(empty)

    def test_header_only_rejected(self, tmp_path):
        f = tmp_path / "patients.csv"
        f.write_text(",".join(pt.CSV_COLUMNS) + "\n")
        with pytest.raises(pt.PatientLoadError, match="no records"):
            pt.load_cohort(f)

    def test_missing_field_named(self, tmp_path):
        src = pt.default_table_path().read_text().splitlines()
        header = src[0].split(",")
        drop = header.index("k_abs")
        rows = [",".join(v for i, v in enumerate(line.split(",")) if i != drop)
                for line in src]
        f = tmp_path / "patients.csv"
        f.write_text("\n".join(rows) + "\n")
        with pytest.raises(pt.PatientLoadError, match="k_abs"):
            pt.load_cohort(f)

    def test_nonpositive_constant_rejected(self, tmp_path):
        src = pt.default_table_path().read_text().splitlines()
        header = src[0].split(",")
        col = header.index("Vg")
        row = src[1].split(",")
        row[col] = "-1.0"
        f = tmp_path / "patients.csv"
        f.write_text("\n".join([src[0], ",".join(row)]) + "\n")
        with pytest.raises(pt.PatientLoadError, match="Vg"):
            pt.load_cohort(f)

    def test_unknown_cohort_rejected(self, tmp_path):
        src = pt.default_table_path().read_text().splitlines()
        header = src[0].split(",")
        col = header.index("cohort")
        row = src[1].split(",")
        row[col] = "senior"
        f = tmp_path / "patients.csv"
        f.write_text("\n".join([src[0], ",".join(row)]) + "\n")
        with pytest.raises(pt.PatientLoadError, match="cohort"):
            pt.load_cohort(f)

    def test_gluco_data_dir_override(self, tmp_path, monkeypatch):
        (tmp_path / "default_patients.csv").write_text(
            pt.default_table_path().read_text())
        monkeypatch.setenv("GLUCO_DATA_DIR", str(tmp_path))
        assert pt.default_table_path().parent == tmp_path
        assert len(pt.load_cohort()) == 30


class TestGlobalTuning:
    def test_scales_by_065(self, cohort):
        p = cohort[0]
        tuned = pt.apply_global_tuning(p)
        assert tuned.Vg == pytest.approx(p.Vg * 0.65)
        assert tuned.Gpb == pytest.approx(p.Gpb * 0.65)
        assert tuned.Gtb == pytest.approx(p.Gtb * 0.65)
        assert tuned.tuned

    def test_vg_example(self, cohort):
        import dataclasses
        p = dataclasses.replace(cohort[0], Vg=1.86)
        assert pt.apply_global_tuning(p).Vg == pytest.approx(1.209)

    def test_identity_factor(self, cohort):
        p = cohort[0]
        tuned = pt.apply_global_tuning(p, factor=1.0)
        assert tuned.Vg == p.Vg and tuned.tuned

    def test_double_application_rejected(self, cohort):
        tuned = pt.apply_global_tuning(cohort[0])
        with pytest.raises(ValueError, match="already"):
            pt.apply_global_tuning(tuned)


class TestAdaptations:
    def test_t1d_scalings(self, cohort):
        p = pt.apply_global_tuning(cohort[20])
        q = pt.adapt_t1d(p, balance=False)
        assert q.S_b_kg == 0.0 and q.beta_cell == 0.0
        assert q.k_max == pytest.approx(2.0 * p.k_max)
        assert q.k_abs == pytest.approx(2.0 * p.k_abs)
        assert q.V_mx == pytest.approx(0.8 * p.V_mx)
        assert q.basal_rate == pytest.approx(0.011 * p.BW)

    def test_t1d_basal_example(self, cohort):
        import dataclasses
        p = pt.apply_global_tuning(dataclasses.replace(cohort[20], BW=86.1))
        q = pt.adapt_t1d(p, balance=False)
        assert q.basal_rate == pytest.approx(0.947, abs=5e-4)

    def test_t2d_shared_scalings(self, cohort):
        p = pt.apply_global_tuning(cohort[5])
        q = pt.adapt_t2d(p, pump=True, balance=False)
        assert q.BW == pytest.approx(1.15 * p.BW)
        assert q.Vi == pytest.approx(1.25 * p.Vi)
        assert q.m30 == pytest.approx(0.85 * p.m30)
        assert q.s_i1 == pytest.approx(p.s_i1 / 2.5)
        assert q.beta_cell == pytest.approx(0.25)

    def test_t2d_no_pump_specifics(self, cohort):
        p = pt.apply_global_tuning(cohort[5])
        q = pt.adapt_t2d(p, pump=False, balance=False)
        assert q.basal_rate == 0.0
        assert q.beta_cell == pytest.approx(0.30)
        assert q.s_i2 == pytest.approx(p.s_i2 / 2.8)
        assert q.K_deriv == 30.0

    def test_adaptation_requires_tuning(self, cohort):
        with pytest.raises(ValueError, match="tuning"):
            pt.adapt_t1d(cohort[0])

    def test_type_flag_set_once(self, cohort):
        q = pt.prepare_patient(cohort[0], "t1d")
        assert q.diabetes_type == "t1d"
        r = pt.prepare_patient(cohort[0], "t2d_pump")
        assert r.diabetes_type == "t2d_pump"


class TestAutoBalance:
    def test_fixed_point_residual(self, cohort):
        p = pt.prepare_patient(cohort[21], "t1d")
        x = pt.basal_state(p)
        u = ph.make_input(ins=pt.basal_insulin_u_per_min(p))
        d = ph.derivatives(p.kind, x, u, pt.pack(p))
        assert abs(d[C.GP]) < 1e-6 and abs(d[C.GT]) < 1e-6

    def test_already_balanced_is_noop(self, cohort):
        p = pt.prepare_patient(cohort[21], "t1d")
        again = pt.auto_balance(p)
        assert again.V_mx == pytest.approx(p.V_mx, abs=1e-10)
        assert again.k_p1 == pytest.approx(p.k_p1, abs=1e-10)
        assert again.Gtb == pytest.approx(p.Gtb, abs=1e-10)

    def test_infeasible_parameters_fail(self, cohort):
        import dataclasses
        p = pt.apply_global_tuning(cohort[21])
        q = pt.adapt_t1d(p, balance=False)
        q = dataclasses.replace(q, k_p2=1e6)
        with pytest.raises(pt.CalibrationError):
            pt.auto_balance(q)

    def test_pump_basal_balances_plasma_insulin(self, cohort):
        p = pt.prepare_patient(cohort[3], "t2d_pump")
        _, _, ip, _ = pt._pk_equilibrium(p)
        assert ip == pytest.approx(p.Ib * p.Vi, rel=1e-6)

    def test_every_patient_every_type_balances(self, cohort):
        cfg = sn.SensorConfig(enabled=False)
        for base in cohort:
            for dtype in pt.DIABETES_TYPES:
                p = pt.prepare_patient(base, dtype)
                assert p.balanced, (base.id, dtype)
                x = pt.basal_state(p)
                sensor = sn.SensorState()
                reading = sn.cgm_read(x[C.GSC], pt.pack(p), sensor,
                                      np.random.default_rng(0), cfg)
                assert abs(reading - p.Gb) <= 5.0, (base.id, dtype)
