"""Baseline controllers emitting logits over the bolus x meal grid.

Stand-ins for learned policies: a bolus-calculator heuristic, a random
controller (seeded), and a constant controller. Shields consume their
logits the same way they would a trained policy's.
"""

from dataclasses import dataclass

import numpy as np

from .shield import ActionSpace


@dataclass(frozen=True)
class PolicySpec:
    """Benchmark controller parameters.

    The heuristic defaults are deliberately on the aggressive side
    (low target, sub-1800-rule correction factor, low carb ratio): the
    benchmark needs an imperfect controller whose failure modes the
    shields can act on, mirroring a policy tuned on one patient and
    deployed on others.
    """
    kind: str = "heuristic"          # heuristic | random | constant
    target_bg: float = 100.0
    correction_factor: float = 0.0   # mg/dL per U; 0 = derive from therapy
    correction_scale: float = 0.55   # aggression vs the 1800-rule estimate
    correction_trigger_bg: float = 150.0  # only correct above this reading
    carb_ratio: float = 5.0          # g per U for meal anticipation
    hypo_meal_g: float = 20.0
    temperature: float = 0.1
    constant_bolus_idx: int = 0
    constant_meal_idx: int = 0

    def validated(self):
        if self.kind not in ("heuristic", "random", "constant"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if (self.temperature <= 0.0 or self.carb_ratio <= 0.0
                or self.target_bg <= 0.0 or self.correction_scale <= 0.0):
            raise ValueError("policy parameters must be positive")
        return self


class HeuristicPolicy:
    """Deterministic bolus-calculator controller.

    Correction dose from the distance above target divided by the
    correction factor, minus insulin on board; a meal-anticipation dose
    inside the pre-bolus window; carbohydrate recommendation when the
    reading drops below 90 mg/dL. Desired quantities map to grid logits
    through a squared-distance score with temperature-controlled
    softness.
    """

    def __init__(self, spec: PolicySpec, space: ActionSpace,
                 correction_factor: float):
        self.spec = spec.validated()
        self.space = space
        self.cf = spec.correction_factor or correction_factor

    def __call__(self, obs) -> np.ndarray:
        spec = self.spec
        want_u = 0.0
        if obs.cgm > spec.correction_trigger_bg:
            want_u = max(0.0, (obs.cgm - spec.target_bg) / self.cf)
        if obs.pre_bolus_flag >= 1.0:
            want_u += obs.next_meal_size_norm * self.space.m_max / spec.carb_ratio
        want_u = max(0.0, want_u - obs.iob_bolus)
        b_norm = min(want_u / self.space.b_max, 1.0)
        m_norm = 0.0
        if obs.cgm < 90.0:
            b_norm = 0.0
            m_norm = min(spec.hypo_meal_g / self.space.m_max, 1.0)
        db = (self.space.bolus_levels - b_norm) ** 2
        dm = (self.space.meal_levels - m_norm) ** 2
        return -(db[:, None] + dm[None, :]) / spec.temperature


class RandomPolicy:
    """Fresh random logits every step; deterministic under its seed."""

    def __init__(self, spec: PolicySpec, space: ActionSpace, seed: int = 0):
        self.space = space
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs) -> np.ndarray:
        return self.rng.normal(0.0, 1.0, size=self.space.shape)


class ConstantPolicy:
    def __init__(self, spec: PolicySpec, space: ActionSpace):
        self.logits = np.zeros(space.shape)
        self.logits[spec.constant_bolus_idx, spec.constant_meal_idx] = 10.0

    def __call__(self, obs) -> np.ndarray:
        return self.logits


def make_policy(spec: PolicySpec, space: ActionSpace, patient,
                 seed: int = 0):
    """Build a controller calibrated on ``patient`` (the reference
    patient; deployment on others is intentionally zero-shot)."""
    spec = spec.validated()
    if spec.kind == "heuristic":
        from .rewards import proxy_for_patient
        cf = spec.correction_scale * proxy_for_patient(patient).isf
        return HeuristicPolicy(spec, space, cf)
    if spec.kind == "random":
        return RandomPolicy(spec, space, seed)
    return ConstantPolicy(spec, space)
