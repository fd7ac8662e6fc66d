"""Runtime action filtering.

Two shields over the discrete bolus x meal grid: a reactive rule set
(threshold suspend, IOB-gated hyper correction, emergency rescue) and a
predictive shield that forecasts candidate actions and down-weights any
whose trajectory leaves the safe band. Plus a Monte Carlo harness for
the reliability bound of the predictive pruning rule.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import forecaster as fc
from . import rewards as rw

MODE_RESCUE = "rescue"
MODE_GATED = "gated_off"
MODE_PREDICTIVE = "predictive"
MODE_PASS = "pass"

BIG_PENALTY = 1e9

# reactive rule thresholds
RULE_RESCUE_BG = 70.0
RULE_HYPER_BG = 250.0
RULE_IOB_SAFE = 2.0
RULE_SUSPEND_BG = 100.0


@dataclass(frozen=True)
class ActionSpace:
    bolus_levels: np.ndarray
    meal_levels: np.ndarray
    b_max: float
    m_max: float

    @property
    def shape(self):
        return (len(self.bolus_levels), len(self.meal_levels))

    def bolus_units(self, idx):
        return float(self.bolus_levels[idx] * self.b_max)

    def meal_grams(self, idx):
        return float(self.meal_levels[idx] * self.m_max)

    def rescue_meal_idx(self, grams=15.0):
        return int(np.argmin(np.abs(self.meal_levels * self.m_max - grams)))


def space_for(patient, n_bolus=6, n_meal=5) -> ActionSpace:
    return ActionSpace(
        bolus_levels=np.linspace(0.0, 1.0, n_bolus),
        meal_levels=np.linspace(0.0, 1.0, n_meal),
        b_max=patient.B_max,
        m_max=patient.M_max,
    )


def softmax(logits):
    flat = np.asarray(logits, dtype=float).ravel()
    z = flat - flat.max()
    e = np.exp(z)
    return (e / e.sum()).reshape(np.shape(logits))


def rule_based_shield(obs, logits, space: ActionSpace,
                      rescue_grams: float = 15.0):
    """Reactive mask: rescue at critical lows, forced correction at
    highs with little insulin on board, low-glucose suspend on a falling
    trend. Returns (masked logits, triggered rule)."""
    masked = np.array(logits, dtype=float)
    bg = obs.cgm
    rescue_idx = space.rescue_meal_idx(rescue_grams)
    if bg < RULE_RESCUE_BG:
        keep = masked[0, rescue_idx]
        masked[:, :] = -BIG_PENALTY
        masked[0, rescue_idx] = keep
        return masked, "rescue"
    if bg > RULE_HYPER_BG and obs.iob_bolus < RULE_IOB_SAFE:
        masked[0, :] -= BIG_PENALTY
        return masked, "hyper_correction"
    if bg < RULE_SUSPEND_BG and obs.cgm_trend < 0.0:
        masked[1:, :] -= BIG_PENALTY
        return masked, "low_glucose_suspend"
    return masked, "none"


@dataclass(frozen=True)
class ShieldConfig:
    g_rescue: float = 60.0
    g_shield_lo: float = 80.0
    g_shield_hi: float = 170.0
    g_fail_lo: float = 70.0
    g_fail_hi: float = 180.0
    beta: float = -10.0
    rescue_boost: float = 10.0
    top_k: int = 3
    # candidate screening window (control steps): long enough to cover
    # the full action of a rapid-acting bolus, not just its onset
    horizon: int = 48
    rescue_grams: float = 15.0
    safe_cap_min_idx: int = 2   # bolus levels at or above get beta in range
    # hyper flags additionally require the candidate's predicted peak to
    # exceed the best candidate's by this much; with an imperfect
    # forecaster, bare threshold crossings are mostly noise
    hyper_band: float = 15.0
    # and never veto carbohydrates at low-normal readings, where a meal
    # request is more plausibly a rescue than a splurge
    hyper_meal_guard_bg: float = 100.0

    def __post_init__(self):
        if not (self.g_fail_lo < self.g_shield_lo):
            raise ValueError("require g_fail_lo < g_shield_lo")
        if not (self.g_shield_hi < self.g_fail_hi):
            raise ValueError("require g_shield_hi < g_fail_hi")
        if not (self.beta < 0.0):
            raise ValueError("beta must be negative")
        if not (self.g_rescue < self.g_shield_lo):
            raise ValueError("require g_rescue < g_shield_lo")


def trajectory_extremes(traj):
    """(min, max) over the forecast window."""
    arr = np.asarray(traj, dtype=float)
    if arr.size == 0:
        raise ValueError("empty trajectory")
    return float(arr.min()), float(arr.max())


@dataclass
class CandidateEval:
    bolus_idx: int
    meal_idx: int
    m: float
    big_m: float
    flagged: bool


@dataclass
class ShieldDecision:
    mode: str
    candidates: list = field(default_factory=list)
    mask: np.ndarray = None
    probs: np.ndarray = None
    rule: str = ""

    def to_json(self):
        return json.dumps({
            "mode": self.mode,
            "rule": self.rule,
            "candidates": [
                {"bolus_idx": c.bolus_idx, "meal_idx": c.meal_idx,
                 "min": round(c.m, 3), "max": round(c.big_m, 3),
                 "flagged": c.flagged}
                for c in self.candidates
            ],
            "mask": np.asarray(self.mask).ravel().tolist(),
        }, sort_keys=True)


class PredictiveShield:
    """Forecast-gated logit masking.

    ``forecaster`` exposes ``ready`` and ``forecast_batch(actions)``
    returning one predicted absolute-BG trajectory per (bolus_u, meal_g)
    pair; while it lacks history, the static rules stand in for the
    predictive check.
    """

    def __init__(self, cfg: ShieldConfig, space: ActionSpace, forecaster):
        self.cfg = cfg
        self.space = space
        self.forecaster = forecaster

    def __call__(self, obs, logits):
        cfg = self.cfg
        nb, nm = self.space.shape
        logits = np.asarray(logits, dtype=float).reshape(nb, nm)
        mask = np.zeros_like(logits)
        bg = obs.cgm
        decision = ShieldDecision(mode=MODE_PASS)

        if bg < cfg.g_rescue:
            rescue_idx = self.space.rescue_meal_idx(cfg.rescue_grams)
            mask[0, rescue_idx] = cfg.rescue_boost
            mask[1:, :] = cfg.beta
            decision.mode = MODE_RESCUE
        elif bg < cfg.g_shield_lo:
            # transition zone: trust the base policy, keep the mask flat
            decision.mode = MODE_GATED
        elif self.forecaster.ready:
            probs = softmax(logits)
            bolus_marginal = probs.sum(axis=1)
            k = min(cfg.top_k, nb)
            top = set(int(i) for i in
                      np.argsort(-bolus_marginal, kind="stable")[:k])
            # screen the no-bolus row too: masking must never divert
            # probability to an unexamined default
            top.add(0)
            pairs = [(b, m) for b in sorted(top) for m in range(nm)]
            actions = [(self.space.bolus_units(b), self.space.meal_grams(m))
                       for b, m in pairs]
            trajs = self.forecaster.forecast_batch(actions, cfg.horizon)
            extremes = [trajectory_extremes(np.concatenate(
                [[bg], np.asarray(traj)[:cfg.horizon]])) for traj in trajs]
            best_hi = min(hi for _, hi in extremes)
            lo_flags, hi_flags = [], []
            for (b, m), (lo, hi) in zip(pairs, extremes):
                # the predictive check vetoes agent-initiated load; it
                # never forces interventions (rescue layers own that),
                # so lows flag insulin-bearing candidates and highs flag
                # meal-bearing ones
                lo_bad = b > 0 and lo < cfg.g_shield_lo
                hi_bad = (m > 0 and bg >= cfg.hyper_meal_guard_bg
                          and hi > cfg.g_shield_hi
                          and hi >= best_hi + cfg.hyper_band)
                lo_flags.append(lo_bad)
                hi_flags.append(hi_bad)
                decision.candidates.append(
                    CandidateEval(b, m, lo, hi, lo_bad or hi_bad))
            # a side that flags every candidate carries no steering
            # information; minimal intervention drops it
            use_lo = not all(lo_flags)
            use_hi = not all(hi_flags)
            for (b, m), lo_bad, hi_bad in zip(pairs, lo_flags, hi_flags):
                if (lo_bad and use_lo) or (hi_bad and use_hi):
                    mask[b, m] = cfg.beta
            decision.mode = MODE_PREDICTIVE if mask.any() else MODE_PASS
        else:
            # no usable forecast yet: the static in-range cap on
            # aggressive corrections stands in for the predictive check
            if cfg.g_fail_lo <= bg <= cfg.g_fail_hi:
                mask[cfg.safe_cap_min_idx:, :] = cfg.beta
                decision.rule = "safe_range_bolus_cap"
            decision.mode = MODE_PREDICTIVE if mask.any() else MODE_PASS

        masked = logits + mask
        decision.mask = mask
        decision.probs = softmax(masked)
        return masked, decision


class AdaptiveForecaster:
    """Episode-local basis adaptation for the predictive shield.

    Collects (context, realized delta) windows as the episode runs,
    refits mixing weights periodically, and forecasts candidates by
    mixing action-conditioned basis rollouts. Returns None until enough
    history accumulated.
    """

    def __init__(self, model: rw.ProxyModel, bank: fc.BasisBank = None,
                 lam: float = 1.0, n_ctx: int = 8, min_ctx: int = 4,
                 refit_every: int = 6, ctx_spacing: int = 12,
                 drain_g_min: float = 10.0, cumulative_fit: bool = False):
        self.model = model
        self.bank = bank or fc.default_bank()
        self.lam = lam
        self.n_ctx = n_ctx
        self.min_ctx = min_ctx
        self.refit_every = refit_every
        # windows opened back to back carry nearly identical
        # information; spacing them out keeps the solve conditioned on
        # genuinely distinct stretches of the episode
        self.ctx_spacing = max(ctx_spacing, 1)
        self.drain_g_min = drain_g_min
        # optional prefix-sum weighting: fit trajectory displacement
        # instead of raw per-step deltas (needs a larger lam)
        self.cumulative_fit = cumulative_fit
        self.coef = None
        self._open = []        # (inputs, collected deltas, last value)
        self._contexts = deque(maxlen=n_ctx)
        self._steps = 0
        self._current_inputs = None

    def observe_step(self, inputs: rw.ProxyInputs, bg_value: float):
        """Feed the decision-time proxy inputs and the current glucose.

        Matured windows are re-anchored on the fluxes that actually
        occurred (read off the tail of the current history), so the
        least-squares fit identifies the patient's response to known
        inputs rather than to whatever the controller later did.
        """
        self._current_inputs = inputs
        horizon = self.model.horizon
        window_min = self.model.horizon_minutes
        still_open = []
        for snap, deltas, last in self._open:
            deltas.append(bg_value - last)
            if len(deltas) >= horizon:
                realized = rw.ProxyInputs(
                    bg0=snap.bg0,
                    past_carb=snap.past_carb,
                    past_ins=snap.past_ins,
                    future_carb=np.asarray(inputs.past_carb[-window_min:]),
                    future_ins=np.asarray(inputs.past_ins[-window_min:]),
                )
                try:
                    g = fc.basis_outputs(realized, self.model, self.bank,
                                         drain_g_min=self.drain_g_min)
                except fc.InsufficientHistory:
                    pass
                else:
                    self._contexts.append((g, np.array(deltas)))
            else:
                still_open.append((snap, deltas, bg_value))
        self._open = still_open
        if self._steps % self.ctx_spacing == 0:
            self._open.append((inputs, [], bg_value))

        self._steps += 1
        if (len(self._contexts) >= self.min_ctx
                and self._steps % self.refit_every == 0):
            blocks = list(self._contexts)
            if self.cumulative_fit:
                blocks = [(np.cumsum(g, axis=0), np.cumsum(y))
                          for g, y in blocks]
            g, y = fc.stack_contexts(blocks)
            self.coef = fc.solve_coefficients(g, y, self.lam)

    @property
    def ready(self) -> bool:
        return self.coef is not None and self._current_inputs is not None

    def forecast(self, bolus_u: float, meal_g: float, horizon: int = None):
        if not self.ready:
            return None
        return self.forecast_batch([(bolus_u, meal_g)], horizon)[0]

    def forecast_batch(self, actions, horizon: int = None):
        """Mix action-conditioned basis rollouts with the fitted
        weights; ``horizon`` may exceed the fitting window."""
        if not self.ready:
            return None
        model = self.model
        if horizon is not None and horizon != model.horizon:
            model = replace(model, horizon=horizon)
        g = fc.basis_outputs_batch(self._current_inputs, model,
                                   self.bank, actions, self.drain_g_min)
        deltas = g @ self.coef.w
        return self._current_inputs.bg0 + np.cumsum(deltas, axis=1)

    def coefficient_snapshot(self):
        return None if self.coef is None else np.array(self.coef.w)


class ProxyForecaster:
    """Static single-model forecaster (no adaptation)."""

    def __init__(self, model: rw.ProxyModel, drain_g_min: float = 10.0):
        self.model = model
        self.drain_g_min = drain_g_min
        self._current_inputs = None

    def observe_step(self, inputs, bg_value):
        self._current_inputs = inputs

    @property
    def ready(self):
        return self._current_inputs is not None

    def forecast(self, bolus_u, meal_g, horizon: int = None):
        if not self.ready:
            return None
        return self.forecast_batch([(bolus_u, meal_g)], horizon)[0]

    def forecast_batch(self, actions, horizon: int = None):
        if not self.ready:
            return None
        model = self.model
        if horizon is not None and horizon != model.horizon:
            model = replace(model, horizon=horizon)
        n_min = model.horizon_minutes
        carb = np.zeros((len(actions), n_min))
        ins = np.zeros((len(actions), n_min))
        for i, (b, m) in enumerate(actions):
            carb[i], ins[i] = rw.action_flux(b, m, n_min, self.drain_g_min)
        return rw.proxy_rollout_batch(self._current_inputs, model,
                                      carb, ins)


# --- reliability-bound verification -----------------------------------


@dataclass(frozen=True)
class ReliabilityReport:
    side: str
    epsilon: float
    alpha: float
    trials: int
    permitted: int
    violations: int
    rate: float
    se: float
    bound: float
    inconclusive: bool

    def line(self):
        status = "inconclusive" if self.inconclusive else (
            "OK" if self.rate <= self.bound else "EXCEEDED")
        return (f"{self.side} eps={self.epsilon:g} alpha={self.alpha:g}: "
                f"rate={self.rate:.4f} bound={self.bound:.4f} "
                f"permitted={self.permitted}/{self.trials} [{status}]")


def make_synthetic_oracle(side: str, horizon: int = 24):
    """Random-walk glucose futures whose extremes straddle the limits."""
    def oracle(rng):
        if side == "hypo":
            bg0 = rng.uniform(70.0, 120.0)
        else:
            bg0 = rng.uniform(130.0, 185.0)
        drift = rng.uniform(-1.25, 1.25)
        steps = rng.normal(drift, 3.0, size=horizon)
        return bg0 + np.cumsum(steps)
    return oracle


def make_reliable_predictor(epsilon: float, alpha: float, side: str):
    """Synthetic predictor whose one-sided error exceeds ``epsilon``
    with probability exactly ``alpha``."""
    def predictor(true_traj, rng):
        bad = rng.random() < alpha
        if side == "hypo":
            off = (epsilon + rng.uniform(0.0, 2.0 * epsilon + 5.0)) if bad \
                else rng.uniform(0.0, epsilon) if epsilon > 0.0 else 0.0
            return true_traj + off
        off = (epsilon + rng.uniform(0.0, 2.0 * epsilon + 5.0)) if bad \
            else rng.uniform(0.0, epsilon) if epsilon > 0.0 else 0.0
        return true_traj - off
    return predictor


def make_adversarial_predictor(epsilon: float, side: str):
    """Violates the reliability premise on every draw."""
    def predictor(true_traj, rng):
        off = 2.0 * epsilon + 10.0
        return true_traj + off if side == "hypo" else true_traj - off
    return predictor


def verify_reliability_bound(oracle, predictor, epsilon, alpha, trials, rng,
                             side: str = "hypo",
                             g_fail_lo: float = 70.0,
                             g_fail_hi: float = 180.0) -> ReliabilityReport:
    """Monte Carlo check of the pruning-rule safety bound.

    Shield thresholds carry the error margin: permitted actions have
    predicted min >= fail + eps (hypo side) or predicted max <= fail -
    eps (hyper side). The report compares the permitted-action failure
    rate against alpha plus twice its binomial standard error.
    """
    permitted = 0
    violations = 0
    for _ in range(trials):
        true_traj = oracle(rng)
        pred = predictor(true_traj, rng)
        if side == "hypo":
            if pred.min() >= g_fail_lo + epsilon:
                permitted += 1
                if true_traj.min() < g_fail_lo:
                    violations += 1
        else:
            if pred.max() <= g_fail_hi - epsilon:
                permitted += 1
                if true_traj.max() > g_fail_hi:
                    violations += 1
    if permitted == 0:
        return ReliabilityReport(side, epsilon, alpha, trials, 0, 0,
                                 math.nan, math.nan, math.nan, True)
    rate = violations / permitted
    se = math.sqrt(alpha * (1.0 - alpha) / permitted) if alpha > 0.0 \
        else math.sqrt(rate * (1.0 - rate) / permitted)
    return ReliabilityReport(side, epsilon, alpha, trials, permitted,
                             violations, rate, se, alpha + 2.0 * se, False)
