import dataclasses
import math

import numpy as np
import pytest

from glucoshield import environment as envm
from glucoshield import patients as pt


@pytest.fixture(scope="module")
def patient():
    return pt.get_patient("adult#02", "t1d")


def quiet_env(patient, days=1, seed=0, **overrides):
    sc = envm.ScenarioConfig(horizon_days=days, **overrides).quiet()
    return envm.GlucoseEnv(patient, sc, seed=seed)


class TestMealSchedule:
    def test_deterministic_under_seed(self):
        a = envm.generate_meal_schedule("adult", 0, np.random.default_rng(5))
        b = envm.generate_meal_schedule("adult", 0, np.random.default_rng(5))
        assert a.events == b.events

    def test_adult_sizes_within_bounds(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            sched = envm.generate_meal_schedule("adult", 0, rng)
            for e in sched.events:
                assert 10.0 <= e.grams <= 100.0

    def test_zero_snack_config_three_events(self):
        cfg = envm.ScheduleConfig(max_snacks=0)
        rng = np.random.default_rng(2)
        sched = envm.generate_meal_schedule("adult", 0, rng, cfg)
        assert len(sched.events) == 3

    def test_sorted_and_day_offset(self):
        rng = np.random.default_rng(4)
        sched = envm.generate_meal_schedule("child", 2, rng)
        times = [e.t_min for e in sched.events]
        assert times == sorted(times)
        assert all(2880.0 <= t < 4320.0 for t in times)


class TestObservation:
    def test_midnight_phase(self, patient):
        env = quiet_env(patient)
        obs = env.observe()
        assert obs.sin_t == pytest.approx(0.0, abs=1e-12)
        assert obs.cos_t == pytest.approx(1.0)

    def test_unit_circle_invariant(self, patient):
        env = quiet_env(patient)
        for _ in range(50):
            obs, *_ = env.step((0, 0))
            assert obs.sin_t ** 2 + obs.cos_t ** 2 == pytest.approx(1.0)

    def test_no_prior_boluses_zero_iob(self, patient):
        env = quiet_env(patient)
        assert env.observe().iob_bolus == 0.0

    def test_pre_bolus_flag_window(self, patient):
        env = quiet_env(patient)
        env._pending_schedule = [envm.MealEvent(20.0, 50.0)]
        assert env.observe().pre_bolus_flag == 1.0
        env._pending_schedule = [envm.MealEvent(40.0, 50.0)]
        assert env.observe().pre_bolus_flag == 0.0

    def test_normalized_components_in_unit_interval(self, patient):
        env = envm.GlucoseEnv(patient, envm.ScenarioConfig(horizon_days=1), 3)
        rng = np.random.default_rng(0)
        while not env.terminated:
            obs, *_ = env.step((int(rng.integers(0, 6)), int(rng.integers(0, 5))))
            arr = obs.as_array()
            assert arr.shape == (14,)
            for v in arr[6:]:
                assert 0.0 <= v <= 1.0
            assert obs.pre_bolus_flag in (0.0, 1.0)

    def test_cob_reads_gut_compartments(self, patient):
        env = quiet_env(patient)
        env.x[[0, 1, 2]] = [10000.0, 5000.0, 3000.0]
        assert env.observe().cob == pytest.approx(18.0)


class TestAcceptance:
    def synthetic(self, patient, cgm, boluses_today=0, meals_today=0,
                  last_meal=None, last_bolus=None):
        env = quiet_env(patient)
        env.last_cgm = cgm
        env.boluses_today = boluses_today
        env.meals_today = meals_today
        env.t_min = 720.0
        if last_meal is not None:
            env.meal_intake_times = [720.0 - last_meal]
        if last_bolus is not None:
            env.bolus_events = [(720.0 - last_bolus, 2.0)]
        return env

    def test_hypo_override_forces_meal_blocks_bolus(self, patient):
        env = self.synthetic(patient, 65.0, last_meal=5.0, boluses_today=0)
        act = env.accept_action(envm.make_action(3, 2, 6, 5))
        assert act.accepted_meal > 0.0          # refractory bypassed
        assert act.accepted_bolus == 0.0
        assert act.blocked_reason == envm.BLOCK_HYPO_OVERRIDE

    def test_daily_cap_blocks_ninth_bolus(self, patient):
        env = self.synthetic(patient, 150.0, boluses_today=8)
        act = env.accept_action(envm.make_action(2, 0, 6, 5))
        assert act.accepted_bolus == 0.0
        assert act.bolus_block == envm.BLOCK_DAILY_CAP

    def test_eighth_bolus_allowed(self, patient):
        env = self.synthetic(patient, 150.0, boluses_today=7)
        act = env.accept_action(envm.make_action(2, 0, 6, 5))
        assert act.accepted_bolus > 0.0

    def test_meal_cgm_gate(self, patient):
        env = self.synthetic(patient, 210.0)
        act = env.accept_action(envm.make_action(0, 2, 6, 5))
        assert act.accepted_meal == 0.0
        assert act.meal_block == envm.BLOCK_CGM_GATE

    def test_refractory_precedes_cgm_gate(self, patient):
        env = self.synthetic(patient, 210.0, last_meal=20.0)
        act = env.accept_action(envm.make_action(0, 2, 6, 5))
        assert act.meal_block == envm.BLOCK_REFRACTORY

    def test_linear_scaling_noise_off(self, patient):
        env = self.synthetic(patient, 150.0)
        b_idx = 3  # norm 0.6 on a 6-level grid
        act = env.accept_action(envm.make_action(b_idx, 0, 6, 5))
        assert act.accepted_bolus == pytest.approx(0.6 * patient.B_max)

    def test_acceptance_order_property(self, patient):
        # hypo-override beats refractory beats CGM gate beats daily cap
        for cgm in (65.0, 150.0, 210.0):
            for refractory in (True, False):
                for capped in (True, False):
                    env = self.synthetic(
                        patient, cgm,
                        meals_today=7 if capped else 0,
                        last_meal=10.0 if refractory else None)
                    act = env.accept_action(envm.make_action(0, 2, 6, 5))
                    if cgm < 70.0:
                        assert act.accepted_meal > 0.0
                    elif refractory:
                        assert act.meal_block == envm.BLOCK_REFRACTORY
                    elif cgm > 200.0:
                        assert act.meal_block == envm.BLOCK_CGM_GATE
                    elif capped:
                        assert act.meal_block == envm.BLOCK_DAILY_CAP
                    else:
                        assert act.accepted_meal > 0.0


class TestStepping:
    def test_zero_action_preserves_equilibrium(self, patient):
        env = quiet_env(patient, **{"schedule": envm.ScheduleConfig(
            main_windows=(), max_snacks=0)})
        cgm0 = env.last_cgm
        obs, *_ = env.step((0, 0))
        assert abs(obs.cgm - cgm0) < 1.0

    def test_meal_buffer_drains_at_10_g_per_min(self, patient):
        env = quiet_env(patient, **{"schedule": envm.ScheduleConfig(
            main_windows=(), max_snacks=0)})
        env.last_cgm = 120.0  # keep gates quiet
        env.step(envm.make_action(0, 4, 6, 5))  # full M_max accepted
        grams = env.record.accepted_meal[-1]
        assert grams == pytest.approx(patient.M_max)
        drained = min(grams, 50.0)
        assert env.pending_g == pytest.approx(grams - drained)
        steps_left = int(np.ceil(env.pending_g / 50.0))
        for _ in range(steps_left):
            env.step((0, 0))
        assert env.pending_g == pytest.approx(0.0)

    def test_bolus_enters_subcutaneous_depot(self, patient):
        env = quiet_env(patient, **{"schedule": envm.ScheduleConfig(
            main_windows=(), max_snacks=0)})
        before = env.x[10]  # Isc1
        env.last_cgm = 150.0
        env.step(envm.make_action(5, 0, 6, 5))
        assert env.record.accepted_bolus[-1] == pytest.approx(patient.B_max)
        # the depot was topped up and decays during the step
        assert env.x[10] > before

    def test_counters_reset_at_midnight(self, patient):
        env = envm.GlucoseEnv(patient, envm.ScenarioConfig(horizon_days=2), 1)
        env.boluses_today = 5
        env.meals_today = 3
        for _ in range(envm.STEPS_PER_DAY):
            env.step((0, 0))
        assert env.boluses_today == 0 and env.meals_today == 0

    def test_step_after_termination_raises(self, patient):
        env = quiet_env(patient)
        while not env.terminated:
            env.step((0, 0))
        with pytest.raises(envm.EpisodeFinished):
            env.step((0, 0))

    def test_same_seed_identical_records(self, patient):
        def run(seed):
            env = envm.GlucoseEnv(patient, envm.ScenarioConfig(horizon_days=1), seed)
            rng = np.random.default_rng(99)
            while not env.terminated:
                env.step((int(rng.integers(0, 6)), int(rng.integers(0, 5))))
            return env.record
        a, b = run(7), run(7)
        assert a.bg == b.bg
        assert a.cgm == b.cgm
        assert a.accepted_bolus == b.accepted_bolus
        assert a.blocked_reason == b.blocked_reason
        c = run(8)
        assert a.cgm != c.cgm

    def test_daily_limits_hold_over_week(self, patient):
        env = envm.GlucoseEnv(patient, envm.ScenarioConfig(horizon_days=7), 5)
        rng = np.random.default_rng(1)
        counts = {}
        while not env.terminated:
            env.step((int(rng.integers(0, 6)), int(rng.integers(0, 5))))
            day = int(env.t_min - 5) // 1440
            if env.record.accepted_bolus[-1] > 0:
                counts.setdefault(day, [0, 0])[0] += 1
            if env.record.accepted_meal[-1] > 0:
                counts.setdefault(day, [0, 0])[1] += 1
        for day, (b, m) in counts.items():
            assert b <= 8, f"day {day} boluses"
            # the hypo override may force meals past the cap
            assert m <= 12, f"day {day} meals"


class TestTermination:
    def test_critical_hyper(self):
        term, reason, _ = envm.check_termination(601.0, 10, 288)
        assert term and reason == envm.TERM_HYPER

    def test_critical_hypo(self):
        term, reason, _ = envm.check_termination(5.0, 10, 288)
        assert term and reason == envm.TERM_HYPO

    def test_in_range_continues(self):
        term, reason, remaining = envm.check_termination(120.0, 10, 288)
        assert not term and reason == envm.TERM_NONE and remaining == 278

    def test_time_limit(self):
        term, reason, remaining = envm.check_termination(120.0, 288, 288)
        assert term and reason == envm.TERM_TIME and remaining == 0

    def test_forced_hypo_terminates_episode(self, patient):
        env = quiet_env(patient)
        env.x[3] = 0.0   # plasma glucose emptied
        env.x[4] = 0.0   # no tissue backflow
        env.x[7] = 1e6   # delayed insulin action suppresses production
        env.x[12] = 0.0
        obs, reward, cost, term, info = env.step((0, 0))
        assert term and env.termination_reason == envm.TERM_HYPO
        assert info["remaining_steps"] > 0


class TestRecordExport:
    def test_csv_round_trip(self, patient, tmp_path):
        env = quiet_env(patient)
        for _ in range(10):
            env.step((0, 0))
        out = tmp_path / "episode.csv"
        env.record.write_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(envm.EpisodeRecord.CSV_COLUMNS)
        assert len(lines) == 11
