"""Clinical risk cost, auxiliary glucose forecast proxy, delta-risk
reward, shaping terms, and the terminal penalty.

The proxy is a deliberately simple linear-response model: carbohydrate
and insulin histories are convolved with fixed activity kernels and a
proportional endogenous correction pulls glucose back toward basal. It
exists to score candidate actions, not to replace the ODE simulator.
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

BG_FLOOR = 40.0
BG_CEIL = 600.0
STEP_MINUTES = 5
KERNEL_MINUTES = 300


@dataclass(frozen=True)
class RiskWeights:
    w_hypo_mild: float = 3.0
    w_hypo_severe: float = 10.0
    w_hyper_mild: float = 1.0
    w_hyper_severe: float = 4.0
    w_mom: float = 0.015
    w_lowvel: float = 0.1
    final_scale: float = 0.35


DEFAULT_WEIGHTS = RiskWeights()


def risk_cost(bg, dbg, w: RiskWeights = DEFAULT_WEIGHTS) -> float:
    """Instantaneous clinical danger of (BG, per-step BG change).

    Piecewise hinge penalties for mild/severe hypo- and hyperglycemia
    plus upward momentum when already high and fast-drop terms.
    Callers multiply by ``w.final_scale`` for the final cost.
    """
    if bg <= 0.0:
        raise ValueError("BG must be positive")
    c = w.w_hypo_mild * (max(0.0, 70.0 - bg) / 20.0)
    c += w.w_hypo_severe * (max(0.0, 54.0 - bg) / 20.0) ** 2
    c += w.w_hyper_mild * (max(0.0, bg - 180.0) / 50.0)
    c += w.w_hyper_severe * (max(0.0, bg - 250.0) / 50.0) ** 2
    c += w.w_mom * max(0.0, bg - 160.0) * max(0.0, dbg)
    c += w.w_lowvel * max(0.0, -(dbg + 2.0))
    return c


def final_cost(bg, dbg, w: RiskWeights = DEFAULT_WEIGHTS) -> float:
    return w.final_scale * risk_cost(bg, dbg, w)


def gamma_kernel(alpha: float, beta: float, length: int = KERNEL_MINUTES) -> np.ndarray:
    """Normalized gamma-shaped activity kernel on the minute grid."""
    tau = np.arange(length, dtype=float)
    k = tau ** (alpha - 1.0) * np.exp(-tau / beta)
    total = k.sum()
    if total <= 0.0:
        raise ValueError("degenerate kernel")
    return k / total


def carb_kernel() -> np.ndarray:
    # peaks near 20 min, typical mixed-meal absorption
    return gamma_kernel(2.0, 20.0)


def insulin_kernel() -> np.ndarray:
    # activity peak at (alpha - 1) * beta = 75 min, 300 min duration
    return gamma_kernel(3.0, 37.5)


@dataclass(frozen=True)
class ProxyModel:
    """Per-patient auxiliary forecast model."""
    csf: float                  # mg/dL per gram
    isf: float                  # mg/dL per unit
    gb: float                   # basal glucose setpoint (mg/dL)
    beta_func: float = 0.0      # residual beta-cell fraction in [0, 1]
    k_endo: float = 0.02        # per-minute endogenous pull
    horizon: int = 24           # control steps (2 h)
    step_min: int = STEP_MINUTES
    carb_k: np.ndarray = field(default_factory=carb_kernel)
    ins_k: np.ndarray = field(default_factory=insulin_kernel)

    @property
    def horizon_minutes(self) -> int:
        return self.horizon * self.step_min


CSF_EFFICIENCY = 0.35
TDD_PER_KG_FLOOR = 0.4


def proxy_for_patient(p, horizon: int = 24) -> ProxyModel:
    """Carb/insulin sensitivity factors from patient morphology and
    therapy: 1800-rule estimate with a weight-based total-daily-dose
    floor so pump-free regimens still get a usable factor."""
    csf = CSF_EFFICIENCY * 1000.0 / (p.BW * p.Vg)
    tdd = max(24.0 * p.basal_rate * 2.0, TDD_PER_KG_FLOOR * p.BW)
    isf = 1800.0 / tdd
    beta_func = p.beta_cell if p.diabetes_type != "t1d" else 0.0
    return ProxyModel(csf=csf, isf=isf, gb=p.Gb, beta_func=beta_func,
                      horizon=horizon)


@dataclass
class ProxyInputs:
    """Minute-resolved histories feeding the proxy.

    ``past_*`` cover the most recent ``KERNEL_MINUTES`` (oldest first);
    ``future_*`` are committed fluxes over the forecast window (pending
    meal drain, basal insulin).
    """
    bg0: float
    past_carb: np.ndarray
    past_ins: np.ndarray
    future_carb: np.ndarray
    future_ins: np.ndarray

    def trimmed(self, horizon_minutes: int) -> "ProxyInputs":
        def fit(a, n, pad_front):
            a = np.asarray(a, dtype=float)
            if len(a) < n:
                pad = np.zeros(n - len(a))
                return np.concatenate([pad, a] if pad_front else [a, pad])
            return a[-n:] if pad_front else a[:n]
        return ProxyInputs(
            bg0=self.bg0,
            past_carb=fit(self.past_carb, KERNEL_MINUTES, True),
            past_ins=fit(self.past_ins, KERNEL_MINUTES, True),
            future_carb=fit(self.future_carb, horizon_minutes, False),
            future_ins=fit(self.future_ins, horizon_minutes, False),
        )


def _future_contribution(past, future, kernel, n_min):
    full = np.concatenate([past, future])
    conv = np.convolve(full, kernel)
    start = len(past)
    return conv[start:start + n_min]


def committed_contributions(inputs: ProxyInputs, model: ProxyModel):
    """Minute-level carb (g) and insulin (U) contributions over the
    forecast window from history plus committed future fluxes, before
    sensitivity scaling. Shared by every candidate and basis variant."""
    n_min = model.horizon_minutes
    inp = inputs.trimmed(n_min)
    base_c = _future_contribution(inp.past_carb, inp.future_carb,
                                  model.carb_k, n_min)
    base_i = _future_contribution(inp.past_ins, inp.future_ins,
                                  model.ins_k, n_min)
    return base_c, base_i


def rollout_from_minutes(bg0, carb_min, ins_min, csf, isf, endo_gain, gb,
                         step_min=STEP_MINUTES):
    """Core forecast loop over pre-aggregated minute contributions.

    ``carb_min``/``ins_min``: (n, H*step_min); ``csf``/``isf``/
    ``endo_gain``: scalars or (n,) row factors. Returns (n, H) absolute
    BG clipped stepwise to [40, 600].
    """
    carb_min = np.atleast_2d(carb_min)
    ins_min = np.atleast_2d(ins_min)
    n, total = carb_min.shape
    h = total // step_min
    csf = np.asarray(csf, dtype=float).reshape(-1)
    isf = np.asarray(isf, dtype=float).reshape(-1)
    endo_gain = np.asarray(endo_gain, dtype=float).reshape(-1)
    carb_step = carb_min.reshape(n, h, step_min).sum(axis=2) * csf[:, None]
    ins_step = ins_min.reshape(n, h, step_min).sum(axis=2) * isf[:, None]
    bg = np.full(n, float(bg0))
    out = np.empty((n, h))
    for k in range(h):
        endo = endo_gain * np.maximum(0.0, bg - gb)
        bg = np.clip(bg + carb_step[:, k] - ins_step[:, k] - endo,
                     BG_FLOOR, BG_CEIL)
        out[:, k] = bg
    return out


def action_flux(bolus_u: float, meal_g: float, n_min: int,
                drain_g_min: float = 10.0):
    """Added minute fluxes for an action taken now: an insulin impulse
    in the first minute and a rate-limited carbohydrate drain."""
    ins = np.zeros(n_min)
    carb = np.zeros(n_min)
    if bolus_u > 0.0:
        ins[0] = bolus_u
    if meal_g > 0.0:
        minutes = int(np.ceil(meal_g / drain_g_min))
        for j in range(min(minutes, n_min)):
            carb[j] = min(drain_g_min, meal_g - j * drain_g_min)
    return carb, ins


def added_contributions(carb_add, ins_add, model: ProxyModel):
    """Minute contributions of extra future fluxes (one row per
    candidate)."""
    n_min = model.horizon_minutes
    carb_add = np.atleast_2d(np.asarray(carb_add, dtype=float))
    ins_add = np.atleast_2d(np.asarray(ins_add, dtype=float))
    ncand = carb_add.shape[0]
    add_c = np.zeros((ncand, n_min))
    add_i = np.zeros((ncand, n_min))
    for c in range(ncand):
        if carb_add[c].any():
            add_c[c] = np.convolve(carb_add[c], model.carb_k)[:n_min]
        if ins_add[c].any():
            add_i[c] = np.convolve(ins_add[c], model.ins_k)[:n_min]
    return add_c, add_i


def proxy_rollout_batch(inputs: ProxyInputs, model: ProxyModel,
                        carb_add, ins_add) -> np.ndarray:
    """Forecast BG trajectories for a batch of candidate additions.

    ``carb_add``/``ins_add``: (ncand, horizon_minutes) extra future
    minute fluxes on top of the committed ones. Returns (ncand, horizon)
    absolute BG, clipped to [40, 600] step by step.
    """
    base_c, base_i = committed_contributions(inputs, model)
    add_c, add_i = added_contributions(carb_add, ins_add, model)
    endo_gain = model.beta_func * model.k_endo * model.step_min
    return rollout_from_minutes(inputs.bg0, base_c + add_c, base_i + add_i,
                                model.csf, model.isf, endo_gain, model.gb,
                                model.step_min)


def proxy_rollout(inputs: ProxyInputs, model: ProxyModel,
                  bolus_u: float = 0.0, meal_g: float = 0.0,
                  drain_g_min: float = 10.0) -> np.ndarray:
    """Single-candidate forecast; (horizon,) absolute BG."""
    carb, ins = action_flux(bolus_u, meal_g, model.horizon_minutes, drain_g_min)
    return proxy_rollout_batch(inputs, model, carb[None, :], ins[None, :])[0]


def _trajectory_risk(bg0, traj, w: RiskWeights):
    total = 0.0
    prev = bg0
    for bg in traj:
        total += risk_cost(bg, bg - prev, w)
        prev = bg
    return total


def delta_risk_reward(inputs: ProxyInputs, model: ProxyModel,
                      bolus_u: float, meal_g: float,
                      w: RiskWeights = DEFAULT_WEIGHTS,
                      drain_g_min: float = 10.0) -> float:
    """Predicted risk reduction of acting now versus doing nothing."""
    if bolus_u <= 0.0 and meal_g <= 0.0:
        return 0.0
    n_min = model.horizon_minutes
    carb, ins = action_flux(bolus_u, meal_g, n_min, drain_g_min)
    trajs = proxy_rollout_batch(inputs, model,
                                np.stack([np.zeros(n_min), carb]),
                                np.stack([np.zeros(n_min), ins]))
    base_risk = _trajectory_risk(inputs.bg0, trajs[0], w)
    act_risk = _trajectory_risk(inputs.bg0, trajs[1], w)
    return base_risk - act_risk


class ShapingTerms(NamedTuple):
    survival: float
    friction: float
    progressive: float
    spacing: float
    inaction: float
    structural: float


@dataclass(frozen=True)
class StepContext:
    bg: float                 # plasma-equivalent BG after the step
    bolus_u: float            # executed bolus (U)
    meal_g: float             # executed meal (g)
    iob: float                # total active insulin, basal + bolus (U)
    n_bolus: int              # post-action daily bolus count
    n_meal: int               # post-action daily meal count
    frac_day: float           # minutes into day / 1440
    dt_since_bolus: float     # minutes since the previous bolus
    exercise_active: bool = False


DAILY_BOLUS_CAP = 8
DAILY_MEAL_CAP = 7


def shaping_terms(ctx: StepContext) -> ShapingTerms:
    took_bolus = ctx.bolus_u > 0.0
    took_meal = ctx.meal_g > 0.0
    inactive = not (took_bolus or took_meal or ctx.exercise_active)

    survival = 0.0
    if inactive:
        if 90.0 <= ctx.bg <= 140.0:
            survival = 0.2
        elif 70.0 <= ctx.bg <= 180.0:
            survival = 0.1

    friction = (
        0.005 * ctx.bolus_u
        + 0.001 * ctx.meal_g
        + (0.005 if took_bolus else 0.0)
        + (0.005 if took_meal else 0.0)
    )
    if took_bolus and ctx.iob > 3.5:
        friction += 0.03 * (ctx.iob - 3.5)

    t_b = 5.0 * ctx.frac_day + 1.0
    t_m = 3.0 * ctx.frac_day + 1.0
    progressive = 0.001 * (
        max(0.0, ctx.n_bolus - t_b) ** 2 + max(0.0, ctx.n_meal - t_m) ** 2
    )

    spacing = 0.01 if (took_bolus and ctx.dt_since_bolus < 30.0) else 0.0

    inaction = 0.0
    if inactive and ctx.bg > 180.0:
        inaction = 0.005 * (ctx.bg - 180.0)

    structural = 0.1 * (
        max(0.0, ctx.n_bolus - DAILY_BOLUS_CAP) ** 2
        + max(0.0, ctx.n_meal - DAILY_MEAL_CAP) ** 2
    )
    return ShapingTerms(survival, friction, progressive, spacing,
                        inaction, structural)


def raw_reward(r_delta: float, terms: ShapingTerms) -> float:
    return (r_delta + terms.survival - terms.friction - terms.progressive
            - terms.spacing - terms.inaction - terms.structural)


def terminal_penalty(remaining_steps: int) -> float:
    """Early-termination penalty; zero when the horizon ran out naturally."""
    if remaining_steps < 0:
        raise ValueError("remaining_steps must be >= 0")
    return 2.0 * remaining_steps
