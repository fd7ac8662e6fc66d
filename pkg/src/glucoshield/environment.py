"""Constrained decision-support environment around the ODE engine.

Control runs on 5-minute steps, each integrating five 1-minute RK4
substeps with circadian modulation and process noise. Recommended
actions pass a clinically motivated acceptance layer before touching
the physiology; rewards and costs come from the proxy forecast and the
clinical risk cost.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import patients as pt
from . import physiology as ph
from . import rewards as rw
from .physiology import common as C
from .physiology import sensor as sn

CONTROL_MINUTES = 5
STEPS_PER_DAY = 1440 // CONTROL_MINUTES
HISTORY_MINUTES = rw.KERNEL_MINUTES

BLOCK_NONE = "none"
BLOCK_REFRACTORY = "refractory"
BLOCK_CGM_GATE = "cgm_gate"
BLOCK_DAILY_CAP = "daily_cap"
BLOCK_HYPO_OVERRIDE = "hypo_override"
BLOCK_EXERCISE = "exercise_conflict"

_BLOCK_PRIORITY = (BLOCK_HYPO_OVERRIDE, BLOCK_REFRACTORY, BLOCK_CGM_GATE,
                   BLOCK_DAILY_CAP, BLOCK_EXERCISE)

MEAL_CGM_GATE = 200.0
BOLUS_CGM_GATE = 70.0
HYPO_OVERRIDE_CGM = 70.0
SCHEDULED_POSTPONE_MIN = 30.0
PRE_BOLUS_LO = 15.0
PRE_BOLUS_HI = 30.0
LOOKAHEAD_NORM_MIN = 180.0

TERM_NONE = ""
TERM_HYPO = "critical-hypo"
TERM_HYPER = "critical-hyper"
TERM_TIME = "time-limit"


class EpisodeFinished(RuntimeError):
    """Raised when stepping an already-terminated episode."""


@dataclass(frozen=True)
class Observation:
    cgm: float
    iob_bolus: float
    cob: float
    cgm_trend: float
    sin_t: float
    cos_t: float
    tsm_norm: float
    tsb_norm: float
    pending_meal_norm: float
    meal_count_norm: float
    bolus_count_norm: float
    time_until_meal_norm: float
    next_meal_size_norm: float
    pre_bolus_flag: float

    def as_array(self) -> np.ndarray:
        return np.array([
            self.cgm, self.iob_bolus, self.cob, self.cgm_trend,
            self.sin_t, self.cos_t, self.tsm_norm, self.tsb_norm,
            self.pending_meal_norm, self.meal_count_norm,
            self.bolus_count_norm, self.time_until_meal_norm,
            self.next_meal_size_norm, self.pre_bolus_flag,
        ])


@dataclass
class ActionPair:
    bolus_idx: int
    meal_idx: int
    bolus_norm: float
    meal_norm: float
    accepted_bolus: float = 0.0
    accepted_meal: float = 0.0
    bolus_block: str = BLOCK_NONE
    meal_block: str = BLOCK_NONE

    @property
    def blocked_reason(self) -> str:
        for reason in _BLOCK_PRIORITY:
            if reason in (self.bolus_block, self.meal_block):
                return reason
        return BLOCK_NONE


def action_grid(n_bolus: int, n_meal: int):
    """Normalized levels of the discrete grid, zero included."""
    return (np.linspace(0.0, 1.0, n_bolus), np.linspace(0.0, 1.0, n_meal))


def make_action(bolus_idx: int, meal_idx: int, n_bolus: int, n_meal: int) -> ActionPair:
    if not (0 <= bolus_idx < n_bolus and 0 <= meal_idx < n_meal):
        raise ValueError("action index outside the grid")
    b_levels, m_levels = action_grid(n_bolus, n_meal)
    return ActionPair(bolus_idx, meal_idx,
                      float(b_levels[bolus_idx]), float(m_levels[meal_idx]))


@dataclass(frozen=True)
class MealEvent:
    t_min: float     # absolute minutes from episode start
    grams: float


@dataclass
class MealSchedule:
    events: list

    def upcoming(self, t_min):
        return [e for e in self.events if e.t_min >= t_min]


@dataclass(frozen=True)
class ScheduleConfig:
    main_windows: tuple = ((390.0, 510.0), (690.0, 810.0), (1050.0, 1170.0))
    main_size: tuple = (45.0, 90.0)
    snack_windows: tuple = ((570.0, 660.0), (900.0, 990.0), (1230.0, 1320.0))
    snack_size: tuple = (15.0, 30.0)
    max_snacks: int = 2
    cohort_scale: tuple = (("child", 0.6), ("adolescent", 0.8), ("adult", 1.0))

    def scale_for(self, cohort):
        return dict(self.cohort_scale).get(cohort, 1.0)


def generate_meal_schedule(cohort, day_index, rng,
                           cfg: ScheduleConfig = ScheduleConfig()) -> MealSchedule:
    """Three jittered main meals plus 0..max_snacks snacks for one day.

    Times are absolute (offset by the day index); sizes scale with the
    cohort. Deterministic for a given generator state.
    """
    scale = cfg.scale_for(cohort)
    offset = 1440.0 * day_index
    events = []
    for lo, hi in cfg.main_windows:
        t = float(np.floor(rng.uniform(lo, hi)))
        size = scale * rng.uniform(*cfg.main_size)
        events.append(MealEvent(offset + t, float(size)))
    n_snacks = int(rng.integers(0, cfg.max_snacks + 1))
    if n_snacks > 0:
        which = rng.choice(len(cfg.snack_windows), size=n_snacks, replace=False)
        for w in sorted(which):
            lo, hi = cfg.snack_windows[w]
            t = float(np.floor(rng.uniform(lo, hi)))
            size = scale * rng.uniform(*cfg.snack_size)
            events.append(MealEvent(offset + t, float(size)))
    events.sort(key=lambda e: e.t_min)
    return MealSchedule(events)


@dataclass(frozen=True)
class ScenarioConfig:
    horizon_days: int = 1
    n_bolus_levels: int = 6
    n_meal_levels: int = 5
    process_noise: bool = True
    sensor_noise: bool = True
    actuation_noise: bool = True
    circadian_amplitude: float = 0.1
    circadian_peak_min: float = 240.0
    ou_theta: float = 0.05
    ou_sigma: float = 0.5
    carb_drain_g_min: float = 10.0
    meal_exec_sigma: float = 0.10
    bolus_exec_sigma: float = 0.01
    iob_dia_min: float = 240.0
    schedule: ScheduleConfig = ScheduleConfig()
    hr_schedule: tuple = ()   # (start_min, end_min, hr_rel) spans

    @property
    def horizon_steps(self) -> int:
        return self.horizon_days * STEPS_PER_DAY

    def quiet(self) -> "ScenarioConfig":
        """Copy with all stochastic effects and the circadian term off."""
        return replace(self, process_noise=False, sensor_noise=False,
                       actuation_noise=False, circadian_amplitude=0.0)


def check_termination(bg, step_count, horizon_steps):
    """Terminal state test; returns (terminated, reason, remaining_steps)."""
    remaining = max(horizon_steps - step_count, 0)
    if bg < 10.0:
        return True, TERM_HYPO, remaining
    if bg > 600.0:
        return True, TERM_HYPER, remaining
    if step_count >= horizon_steps:
        return True, TERM_TIME, 0
    return False, TERM_NONE, remaining


def iob_kernel(dt_min, dia_min=240.0):
    """Linear insulin-activity decay: 1 at dt=0, 0 at dt >= dia."""
    return max(0.0, 1.0 - dt_min / dia_min)


@dataclass
class EpisodeRecord:
    patient_id: str = ""
    diabetes_type: str = ""
    seed: int = 0
    t_min: list = field(default_factory=list)
    bg: list = field(default_factory=list)
    cgm: list = field(default_factory=list)
    obs: list = field(default_factory=list)
    bolus_idx: list = field(default_factory=list)
    meal_idx: list = field(default_factory=list)
    accepted_bolus: list = field(default_factory=list)
    accepted_meal: list = field(default_factory=list)
    blocked_reason: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    shield_mode: list = field(default_factory=list)
    termination_reason: str = TERM_NONE

    CSV_COLUMNS = (
        "step", "t_min", "bg", "cgm", "bolus_idx", "meal_idx",
        "accepted_bolus", "accepted_meal", "blocked_reason",
        "reward", "cost", "shield_mode",
    )

    def append(self, **kw):
        for key, value in kw.items():
            getattr(self, key).append(value)

    def rows(self):
        for i in range(len(self.t_min)):
            yield (i, self.t_min[i], self.bg[i], self.cgm[i],
                   self.bolus_idx[i], self.meal_idx[i],
                   self.accepted_bolus[i], self.accepted_meal[i],
                   self.blocked_reason[i], self.reward[i], self.cost[i],
                   self.shield_mode[i])

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for row in self.rows():
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


class GlucoseEnv:
    """One virtual patient under 5-minute decision-support control."""

    def __init__(self, patient: pt.PatientParams, scenario: ScenarioConfig,
                 seed: int = 0):
        if not patient.balanced:
            raise ValueError("patient record must be balanced before simulation")
        self.patient = patient
        self.cfg = scenario
        self.seed = seed
        self.pvec = pt.pack(patient)
        self.kind = patient.kind
        self.basal_u_min = pt.basal_insulin_u_per_min(patient)
        self.proxy = rw.proxy_for_patient(patient)
        self.weights = rw.DEFAULT_WEIGHTS
        # steady-state basal contribution to total IOB under the linear kernel
        dia = int(scenario.iob_dia_min)
        self._basal_iob = self.basal_u_min * sum(
            iob_kernel(j, scenario.iob_dia_min) for j in range(dia)
        )
        self.reset()

    # -- lifecycle -------------------------------------------------------

    def reset(self) -> Observation:
        ss = np.random.SeedSequence(self.seed)
        s_sched, s_proc, s_sensor, s_act = ss.spawn(4)
        self._rng_proc = np.random.default_rng(s_proc)
        self._rng_sensor = np.random.default_rng(s_sensor)
        self._rng_act = np.random.default_rng(s_act)
        rng_sched = np.random.default_rng(s_sched)

        events = []
        for day in range(self.cfg.horizon_days):
            events.extend(generate_meal_schedule(
                self.patient.cohort, day, rng_sched, self.cfg.schedule).events)
        self.schedule = MealSchedule(events)
        self._pending_schedule = list(events)

        self.x = pt.basal_state(self.patient)
        self.t_min = 0.0
        self.step_count = 0
        self.terminated = False
        self.termination_reason = TERM_NONE

        self.pending_g = 0.0
        self.d_bar = 0.0
        self.carb_hist = [0.0] * HISTORY_MINUTES
        self.ins_hist = [self.basal_u_min] * HISTORY_MINUTES
        self.bolus_events = []       # (t_min, units) accepted controller boluses
        self.meal_intake_times = []  # any carb intake start (controller or scheduled)
        self.meals_today = 0
        self.boluses_today = 0
        self.last_controller_meal_t = -math.inf

        self.sensor = sn.SensorState(last_reading=self.patient.Gb)
        self.sensor_cfg = sn.SensorConfig(enabled=self.cfg.sensor_noise)
        self.record = EpisodeRecord(patient_id=self.patient.id,
                                    diabetes_type=self.patient.diabetes_type,
                                    seed=self.seed)
        self.last_cgm = sn.cgm_read(self.x[C.GSC], self.pvec, self.sensor,
                                    self._rng_sensor, self.sensor_cfg)
        self.prev_cgm = self.last_cgm
        return self.observe()

    # -- views -----------------------------------------------------------

    @property
    def bg(self) -> float:
        """Plasma-equivalent blood glucose (mg/dL)."""
        return float(self.x[C.GP] / self.patient.Vg)

    @property
    def time_of_day(self) -> float:
        return self.t_min % 1440.0

    def iob_bolus(self, t=None) -> float:
        t = self.t_min if t is None else t
        return sum(u * iob_kernel(t - tb, self.cfg.iob_dia_min)
                   for tb, u in self.bolus_events
                   if t - tb < self.cfg.iob_dia_min)

    def iob_total(self) -> float:
        return self.iob_bolus() + self._basal_iob

    def _exercise_active(self) -> bool:
        return self._hr_rel(self.t_min) > 0.0

    def _hr_rel(self, t):
        for start, end, level in self.cfg.hr_schedule:
            if start <= (t % 1440.0) < end:
                return level
        return 0.0

    def _next_scheduled(self):
        for e in self._pending_schedule:
            if e.t_min >= self.t_min:
                return e
        return None

    def observe(self) -> Observation:
        tod = self.time_of_day
        angle = 2.0 * math.pi * tod / 1440.0
        last_meal = self.meal_intake_times[-1] if self.meal_intake_times else None
        last_bolus = self.bolus_events[-1][0] if self.bolus_events else None
        tsm = 1.0 if last_meal is None else min((self.t_min - last_meal) / LOOKAHEAD_NORM_MIN, 1.0)
        tsb = 1.0 if last_bolus is None else min((self.t_min - last_bolus) / LOOKAHEAD_NORM_MIN, 1.0)
        nxt = self._next_scheduled()
        if nxt is None:
            t_until, size_norm, pre_bolus = 1.0, 0.0, 0.0
        else:
            dt_next = nxt.t_min - self.t_min
            t_until = min(dt_next / LOOKAHEAD_NORM_MIN, 1.0)
            size_norm = min(nxt.grams / self.patient.M_max, 1.0)
            pre_bolus = 1.0 if PRE_BOLUS_LO <= dt_next <= PRE_BOLUS_HI else 0.0
        trend = (self.last_cgm - self.prev_cgm) / CONTROL_MINUTES
        return Observation(
            cgm=self.last_cgm,
            iob_bolus=self.iob_bolus(),
            cob=float((self.x[C.D1] + self.x[C.D2] + self.x[C.D3]) / 1000.0),
            cgm_trend=trend,
            sin_t=math.sin(angle),
            cos_t=math.cos(angle),
            tsm_norm=tsm,
            tsb_norm=tsb,
            pending_meal_norm=min(self.pending_g / self.patient.M_max, 1.0),
            meal_count_norm=min(self.meals_today / rw.DAILY_MEAL_CAP, 1.0),
            bolus_count_norm=min(self.boluses_today / rw.DAILY_BOLUS_CAP, 1.0),
            time_until_meal_norm=t_until,
            next_meal_size_norm=size_norm,
            pre_bolus_flag=pre_bolus,
        )

    # -- acceptance ------------------------------------------------------

    def accept_action(self, action: ActionPair) -> ActionPair:
        """Gate a recommendation: hypo override, refractory windows, CGM
        gates, daily caps, exercise exclusion; then execution noise."""
        cgm = self.last_cgm
        t = self.t_min
        p = self.patient
        want_bolus = p.B_max * action.bolus_norm if action.bolus_idx > 0 else 0.0
        want_meal = p.M_max * action.meal_norm if action.meal_idx > 0 else 0.0

        bolus_block = BLOCK_NONE
        meal_block = BLOCK_NONE
        if cgm < HYPO_OVERRIDE_CGM:
            # self-preservation: the meal request executes past every
            # block, insulin is refused outright
            if want_bolus > 0.0:
                bolus_block = BLOCK_HYPO_OVERRIDE
                want_bolus = 0.0
        else:
            if want_meal > 0.0:
                last_meal = self.meal_intake_times[-1] if self.meal_intake_times else None
                if self._exercise_active():
                    meal_block = BLOCK_EXERCISE
                elif last_meal is not None and t - last_meal < p.W_meal:
                    meal_block = BLOCK_REFRACTORY
                elif cgm > MEAL_CGM_GATE:
                    meal_block = BLOCK_CGM_GATE
                elif self.meals_today >= int(p.max_meals_day):
                    meal_block = BLOCK_DAILY_CAP
                if meal_block != BLOCK_NONE:
                    want_meal = 0.0
            if want_bolus > 0.0:
                last_bolus = self.bolus_events[-1][0] if self.bolus_events else None
                if last_bolus is not None and t - last_bolus < p.W_bolus:
                    bolus_block = BLOCK_REFRACTORY
                elif cgm < BOLUS_CGM_GATE:
                    bolus_block = BLOCK_CGM_GATE
                elif self.boluses_today >= int(p.max_boluses_day):
                    bolus_block = BLOCK_DAILY_CAP
                if bolus_block != BLOCK_NONE:
                    want_bolus = 0.0

        if want_bolus > 0.0 and self.cfg.actuation_noise:
            want_bolus *= 1.0 + self.cfg.bolus_exec_sigma * self._rng_act.standard_normal()
        if want_meal > 0.0 and self.cfg.actuation_noise:
            want_meal *= 1.0 + self.cfg.meal_exec_sigma * self._rng_act.standard_normal()
        action.accepted_bolus = min(max(want_bolus, 0.0), p.B_max * 1.05)
        action.accepted_meal = max(want_meal, 0.0)
        action.bolus_block = bolus_block
        action.meal_block = meal_block
        return action

    # -- stepping --------------------------------------------------------

    def _start_meal(self, grams, controller: bool):
        self.pending_g += grams
        self.d_bar = float(self.x[C.D1] + self.x[C.D2]) + 1000.0 * grams
        self.meal_intake_times.append(self.t_min)
        if controller:
            self.meals_today += 1
            self.last_controller_meal_t = self.t_min

    def _due_scheduled_meals(self):
        """Scheduled events due in this control step, honoring the
        postponement buffer after a controller meal."""
        due = []
        still = []
        delay_until = self.last_controller_meal_t + SCHEDULED_POSTPONE_MIN
        for e in self._pending_schedule:
            fire_at = e.t_min
            if self.last_controller_meal_t <= fire_at < delay_until:
                fire_at = delay_until
            if fire_at < self.t_min + CONTROL_MINUTES:
                due.append(e)
            else:
                still.append(e)
        self._pending_schedule = still
        return due

    def proxy_inputs(self, include_scheduled: bool = False,
                     horizon_minutes: int = None) -> rw.ProxyInputs:
        """Committed-state inputs for the proxy forecast at this instant.

        ``include_scheduled`` folds announced upcoming meals into the
        future carbohydrate flux (what a schedule-aware predictor may
        condition on); the reward baseline keeps it off.
        """
        n_min = horizon_minutes or self.proxy.horizon_minutes
        future_ins = np.full(n_min, self.basal_u_min)
        future_carb = np.zeros(n_min)
        rate = self.cfg.carb_drain_g_min

        def add_drain(start_idx, grams):
            j = start_idx
            while grams > 0.0 and j < n_min:
                take = min(rate, grams)
                future_carb[j] += take
                grams -= take
                j += 1

        add_drain(0, self.pending_g)
        if include_scheduled:
            for e in self._pending_schedule:
                offset = int(e.t_min - self.t_min)
                if 0 <= offset < n_min:
                    add_drain(offset, e.grams)
        return rw.ProxyInputs(
            bg0=self.bg,
            past_carb=np.array(self.carb_hist[-HISTORY_MINUTES:]),
            past_ins=np.array(self.ins_hist[-HISTORY_MINUTES:]),
            future_carb=future_carb,
            future_ins=future_ins,
        )

    def step(self, action, shield_mode: str = ""):
        """Advance one control step. ``action`` is an ActionPair or an
        (bolus_idx, meal_idx) tuple. Returns (obs, reward, cost,
        terminated, info)."""
        if self.terminated:
            raise EpisodeFinished("episode already terminated; call reset()")
        if not isinstance(action, ActionPair):
            action = make_action(action[0], action[1],
                                 self.cfg.n_bolus_levels, self.cfg.n_meal_levels)
        action = self.accept_action(action)
        bg_before = self.bg
        inputs_before = self.proxy_inputs()

        # delta-risk term against inaction, on executed quantities
        r_delta = rw.delta_risk_reward(inputs_before, self.proxy,
                                       action.accepted_bolus,
                                       action.accepted_meal,
                                       self.weights,
                                       self.cfg.carb_drain_g_min)

        dt_since_bolus = (self.t_min - self.bolus_events[-1][0]
                          if self.bolus_events else math.inf)

        if action.accepted_bolus > 0.0:
            self.x[C.ISC1] += action.accepted_bolus * C.PMOL_PER_UNIT / self.patient.BW
            self.bolus_events.append((self.t_min, action.accepted_bolus))
            self.boluses_today += 1
        if action.accepted_meal > 0.0:
            self._start_meal(action.accepted_meal, controller=True)
        for e in self._due_scheduled_meals():
            self._start_meal(e.grams, controller=False)

        # per-minute inputs for the five RK4 substeps
        u_rows = np.zeros((CONTROL_MINUTES, C.N_INPUT))
        gp_noise = np.zeros(CONTROL_MINUTES)
        ou = self.sensor.ou_value
        for j in range(CONTROL_MINUTES):
            t_j = self.t_min + j
            drain = min(self.pending_g, self.cfg.carb_drain_g_min)
            self.pending_g -= drain
            u_rows[j, C.U_CHO] = drain
            u_rows[j, C.U_INS] = self.basal_u_min
            u_rows[j, C.U_HR] = self._hr_rel(t_j)
            u_rows[j, C.U_DBAR] = self.d_bar
            u_rows[j, C.U_CIRC] = sn.circadian_factor(
                t_j % 1440.0, self.cfg.circadian_amplitude,
                self.cfg.circadian_peak_min) - 1.0
            if self.cfg.process_noise:
                ou_next = sn.ou_step(ou, self.cfg.ou_theta, self.cfg.ou_sigma,
                                     1.0, self._rng_proc)
                gp_noise[j] = (ou_next - ou) * self.patient.Vg
                ou = ou_next
            self.carb_hist.append(drain)
            self.ins_hist.append(self.basal_u_min
                                 + (action.accepted_bolus if j == 0 else 0.0))
        self.sensor.ou_value = ou

        self.x = ph.step_minutes(self.kind, self.x, u_rows, gp_noise, self.pvec)
        self.t_min += CONTROL_MINUTES
        self.step_count += 1
        if self.time_of_day == 0.0:
            self.meals_today = 0
            self.boluses_today = 0

        self.prev_cgm = self.last_cgm
        self.last_cgm = sn.cgm_read(self.x[C.GSC], self.pvec, self.sensor,
                                    self._rng_sensor, self.sensor_cfg)
        bg_after = self.bg
        dbg = bg_after - bg_before

        # cost: meal taken in range is scored on the no-action forecast
        if (action.accepted_meal > 0.0 and 70.0 <= bg_before <= 180.0):
            base_traj = rw.proxy_rollout(inputs_before, self.proxy)
            cost = rw.final_cost(float(base_traj[0]),
                                 float(base_traj[0]) - bg_before, self.weights)
        else:
            # a fully drained plasma compartment clamps at zero; keep the
            # risk evaluation inside its domain
            cost = rw.final_cost(max(bg_after, 1.0), dbg, self.weights)

        ctx = rw.StepContext(
            bg=bg_after,
            bolus_u=action.accepted_bolus,
            meal_g=action.accepted_meal,
            iob=self.iob_total(),
            n_bolus=self.boluses_today,
            n_meal=self.meals_today,
            frac_day=self.time_of_day / 1440.0,
            dt_since_bolus=dt_since_bolus,
            exercise_active=self._exercise_active(),
        )
        reward = rw.raw_reward(r_delta, rw.shaping_terms(ctx))

        terminated, reason, remaining = check_termination(
            bg_after, self.step_count, self.cfg.horizon_steps)
        if terminated:
            self.terminated = True
            self.termination_reason = reason
            self.record.termination_reason = reason
            if reason != TERM_TIME:
                reward -= rw.terminal_penalty(remaining)

        obs = self.observe()
        self.record.append(
            t_min=self.t_min, bg=bg_after, cgm=self.last_cgm,
            obs=obs.as_array(), bolus_idx=action.bolus_idx,
            meal_idx=action.meal_idx, accepted_bolus=action.accepted_bolus,
            accepted_meal=action.accepted_meal,
            blocked_reason=action.blocked_reason, reward=reward, cost=cost,
            shield_mode=shield_mode,
        )
        info = {"action": action, "bg": bg_after, "r_delta": r_delta,
                "remaining_steps": remaining, "reason": reason}
        return obs, reward, cost, terminated, info
