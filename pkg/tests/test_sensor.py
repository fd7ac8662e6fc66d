import numpy as np
import pytest

from glucoshield import patients as pt
from glucoshield.physiology import common as C
from glucoshield.physiology import sensor as sn


@pytest.fixture(scope="module")
def pvec():
    return pt.pack(pt.get_patient("adult#01", "t1d"))


class TestCircadian:
    def test_neutral_factor_zero_rate(self, pvec):
        x = np.zeros(C.N_STATE)
        # amplitude 0 makes c(t) = 1 at every t
        for t in (0.0, 240.0, 900.0):
            assert sn.circadian_rate(t, x, pvec, C.KIND_T1D, amplitude=0.0) == 0.0

    def test_t1d_form_direct_substitution(self, pvec):
        x = np.zeros(C.N_STATE)
        rate = sn.circadian_rate(240.0, x, pvec, C.KIND_T1D,
                                 amplitude=0.1, peak_min=240.0)
        assert rate == pytest.approx(0.1 * pvec[C.P_KP1], rel=1e-12)

    def test_peak_in_early_morning_window(self):
        ts = np.arange(0.0, 1440.0)
        values = [sn.circadian_factor(t) for t in ts]
        peak_t = ts[int(np.argmax(values))]
        assert 180.0 <= peak_t <= 360.0  # 03:00-06:00

    def test_t2d_form_scales_with_suppression(self, pvec):
        x = np.zeros(C.N_STATE)
        x[C.X3] = 2.0  # clipped to 0.95
        rate = sn.circadian_rate(240.0, x, pvec, C.KIND_T2D,
                                 amplitude=0.1, peak_min=240.0)
        assert rate == pytest.approx(0.1 * pvec[C.P_EGP0] * 0.05, rel=1e-9)


class TestOu:
    def test_deterministic_mean_reversion(self):
        rng = np.random.default_rng(0)
        assert sn.ou_step(1.0, 0.1, 0.0, 1.0, rng) == pytest.approx(0.9)

    def test_zero_is_fixed_point(self):
        rng = np.random.default_rng(0)
        v = 0.0
        for _ in range(100):
            v = sn.ou_step(v, 0.1, 0.0, 1.0, rng)
        assert v == 0.0

    def test_stationary_variance(self):
        theta, sigma = 0.05, 0.5
        rng = np.random.default_rng(12345)
        n = 1_000_000
        shocks = sigma * rng.standard_normal(n)
        values = np.empty(n)
        v = 0.0
        for i in range(n):
            v = v + theta * (0.0 - v) + shocks[i]
            values[i] = v
        expected = sigma ** 2 / (2.0 * theta)
        assert np.var(values[1000:]) == pytest.approx(expected, rel=0.10)

    def test_parameter_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sn.ou_step(0.0, 0.0, 1.0, 1.0, rng)
        with pytest.raises(ValueError):
            sn.ou_step(0.0, 0.1, -1.0, 1.0, rng)


class TestCgm:
    def make(self, **kw):
        return sn.SensorState(**kw), sn.SensorConfig(noise_std=0.0,
                                                     dropout_p=0.0,
                                                     drift_std=0.0)

    def test_hard_clip_high(self, pvec):
        sensor, cfg = self.make()
        rng = np.random.default_rng(0)
        gsc = 500.0 * pvec[C.P_VG]  # concentration 500 mg/dL
        assert sn.cgm_read(gsc, pvec, sensor, rng, cfg) == 400.0

    def test_identity_path(self, pvec):
        sensor, cfg = self.make()
        rng = np.random.default_rng(0)
        gsc = 120.0 * pvec[C.P_VG]
        assert sn.cgm_read(gsc, pvec, sensor, rng, cfg) == pytest.approx(120.0)

    def test_dropout_forward_fills(self, pvec):
        sensor, cfg = self.make(last_reading=150.0)
        cfg.dropout_p = 1.0
        rng = np.random.default_rng(0)
        reading = sn.cgm_read(90.0 * pvec[C.P_VG], pvec, sensor, rng, cfg)
        assert reading == 150.0
        assert sensor.dropout_active

    def test_drift_stays_bounded(self, pvec):
        sensor = sn.SensorState()
        cfg = sn.SensorConfig(noise_std=2.0, dropout_p=0.005, drift_std=0.01)
        rng = np.random.default_rng(3)
        for _ in range(2000):
            reading = sn.cgm_read(120.0 * pvec[C.P_VG], pvec, sensor, rng, cfg)
            assert 0.9 <= sensor.bias <= 1.1
            assert 0.9 <= sensor.scale <= 1.1
            assert 40.0 <= reading <= 400.0

    def test_rejects_negative_gsc(self, pvec):
        sensor, cfg = self.make()
        with pytest.raises(ValueError):
            sn.cgm_read(-1.0, pvec, sensor, np.random.default_rng(0), cfg)
