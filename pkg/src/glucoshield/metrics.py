"""Clinical outcome metrics and benchmark statistics."""

import math
from dataclasses import dataclass

import numpy as np

TARGET_LO = 70.0
TARGET_HI = 180.0


@dataclass(frozen=True)
class ClinicalSummary:
    tir_pct: float
    cv_pct: float
    mean_risk_index: float
    hypo_event_pct: float
    hyper_event_pct: float
    reward_sum: float
    cost_sum: float


def tir(trace) -> float:
    """Percent of samples inside [70, 180] mg/dL, boundaries included."""
    arr = np.asarray(trace, dtype=float)
    if arr.size == 0:
        raise ValueError("empty trace")
    inside = (arr >= TARGET_LO) & (arr <= TARGET_HI)
    return 100.0 * inside.mean()


def cv(trace) -> float:
    """Coefficient of variation (population sigma over mean), percent."""
    arr = np.asarray(trace, dtype=float)
    if arr.size == 0:
        raise ValueError("empty trace")
    mu = arr.mean()
    if mu <= 0.0:
        raise ValueError("trace mean must be positive")
    return 100.0 * arr.std() / mu


def symmetrized(bg: float) -> float:
    return 1.509 * (math.log(bg) ** 1.084 - 5.381)


def risk_index(trace) -> float:
    """Mean of 10 f(G)^2 with the standard symmetrizing transform;
    asymmetric, weighting lows far above symmetric-distance highs."""
    arr = np.asarray(trace, dtype=float)
    if arr.size == 0:
        raise ValueError("empty trace")
    if np.any(arr <= 1.0):
        raise ValueError("risk index needs BG > 1 mg/dL")
    f = 1.509 * (np.log(arr) ** 1.084 - 5.381)
    return float(np.mean(10.0 * f * f))


def event_rates(trace):
    """(% samples below 70, % samples above 180)."""
    arr = np.asarray(trace, dtype=float)
    if arr.size == 0:
        raise ValueError("empty trace")
    return (100.0 * (arr < TARGET_LO).mean(),
            100.0 * (arr > TARGET_HI).mean())


def summarize(trace, reward_sum=0.0, cost_sum=0.0) -> ClinicalSummary:
    hypo, hyper = event_rates(trace)
    return ClinicalSummary(
        tir_pct=tir(trace),
        cv_pct=cv(trace),
        mean_risk_index=risk_index(trace),
        hypo_event_pct=hypo,
        hyper_event_pct=hyper,
        reward_sum=float(reward_sum),
        cost_sum=float(cost_sum),
    )


def generalization_gap(id_summary: ClinicalSummary, ood_summary: ClinicalSummary):
    """(delta TIR, delta Risk) as unseen minus training patient; negative
    TIR deltas mean degradation."""
    return (ood_summary.tir_pct - id_summary.tir_pct,
            ood_summary.mean_risk_index - id_summary.mean_risk_index)


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.size < 3:
        raise ValueError("need equal-length samples, at least 3")
    sx = xs.std()
    sy = ys.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance input")
    r = float(((xs - xs.mean()) * (ys - ys.mean())).mean() / (sx * sy))
    return max(-1.0, min(1.0, r))
