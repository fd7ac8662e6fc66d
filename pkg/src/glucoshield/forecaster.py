"""Basis-adaptive glucose prediction.

A bank of parametric forecast variants (carb/insulin sensitivity
rescalings of the proxy model) produces per-step delta trajectories;
patient-specific mixing weights come from a regularized least-squares
fit against observed context windows, and absolute predictions are
rebuilt by cumulating the mixed increments from the last observation.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import rewards as rw


class InsufficientHistory(ValueError):
    """Context too short to evaluate the basis generators."""


class SingularSystem(np.linalg.LinAlgError):
    """Normal equations are singular; retry with a positive ridge weight."""


@dataclass(frozen=True)
class BasisSpec:
    csf_scale: float = 1.0
    isf_scale: float = 1.0
    k_endo_scale: float = 1.0


@dataclass(frozen=True)
class BasisBank:
    specs: tuple

    def __len__(self):
        return len(self.specs)


def default_bank() -> BasisBank:
    """K = 6: carb sensitivity x {0.6, 1.0, 1.4} crossed with insulin
    sensitivity x {0.7, 1.3}."""
    specs = tuple(
        BasisSpec(csf_scale=c, isf_scale=i)
        for c in (0.6, 1.0, 1.4)
        for i in (0.7, 1.3)
    )
    return BasisBank(specs)


def scaled_model(model: rw.ProxyModel, spec: BasisSpec) -> rw.ProxyModel:
    return replace(model, csf=model.csf * spec.csf_scale,
                   isf=model.isf * spec.isf_scale,
                   k_endo=model.k_endo * spec.k_endo_scale)


def basis_outputs(inputs: rw.ProxyInputs, model: rw.ProxyModel,
                  bank: BasisBank, bolus_u: float = 0.0, meal_g: float = 0.0,
                  drain_g_min: float = 10.0) -> np.ndarray:
    """(P, K) matrix of per-step predicted deltas, one column per basis."""
    if inputs.bg0 is None or not np.isfinite(inputs.bg0):
        raise InsufficientHistory("no anchor glucose value in context")
    return basis_outputs_batch(inputs, model, bank, [(bolus_u, meal_g)],
                               drain_g_min)[0]


def basis_outputs_batch(inputs, model, bank, actions, drain_g_min=10.0):
    """(ncand, P, K) deltas for many candidate actions at once.

    ``actions``: sequence of (bolus_u, meal_g). One vectorized rollout
    covers the full candidates-by-bases grid: per-row sensitivity
    factors carry the basis rescalings, so the inner loop runs once.
    """
    n_min = model.horizon_minutes
    na, nk = len(actions), len(bank)
    carb = np.zeros((na, n_min))
    ins = np.zeros((na, n_min))
    for i, (b, m) in enumerate(actions):
        carb[i], ins[i] = rw.action_flux(b, m, n_min, drain_g_min)
    base_c, base_i = rw.committed_contributions(inputs, model)
    add_c, add_i = rw.added_contributions(carb, ins, model)
    carb_min = np.tile(base_c + add_c, (nk, 1))
    ins_min = np.tile(base_i + add_i, (nk, 1))
    csf = np.repeat([model.csf * s.csf_scale for s in bank.specs], na)
    isf = np.repeat([model.isf * s.isf_scale for s in bank.specs], na)
    endo = np.repeat([model.beta_func * model.k_endo * model.step_min
                      * s.k_endo_scale for s in bank.specs], na)
    trajs = rw.rollout_from_minutes(inputs.bg0, carb_min, ins_min,
                                    csf, isf, endo, model.gb, model.step_min)
    anchored = np.concatenate(
        [np.full((nk * na, 1), inputs.bg0), trajs], axis=1)
    deltas = np.diff(anchored, axis=1).reshape(nk, na, model.horizon)
    return np.moveaxis(deltas, 0, 2)


@dataclass(frozen=True)
class Coefficients:
    w: np.ndarray
    lam: float


def stack_contexts(blocks):
    """Stack per-context (G, y) pairs into one design matrix and target."""
    gs, ys = zip(*blocks)
    return np.vstack(gs), np.concatenate([np.asarray(y).ravel() for y in ys])


def solve_coefficients(g_stack, y_stack, lam: float = 1e-3) -> Coefficients:
    """Ridge solve of ||G w - y||^2 + lam ||w||^2 via normal equations."""
    g = np.asarray(g_stack, dtype=float)
    y = np.asarray(y_stack, dtype=float).ravel()
    if g.ndim != 2 or g.shape[0] != y.shape[0]:
        raise ValueError("design matrix and targets disagree")
    if lam < 0.0:
        raise ValueError("lam must be >= 0")
    k = g.shape[1]
    if lam == 0.0 and g.shape[0] < k:
        raise SingularSystem(
            "underdetermined system with lam = 0; pass lam > 0")
    a = g.T @ g + lam * np.eye(k)
    b = g.T @ y
    try:
        cho = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(
            "singular normal equations; pass lam > 0") from exc
    w = np.linalg.solve(cho.T, np.linalg.solve(cho, b))
    return Coefficients(w=w, lam=lam)


def predict(last_y: float, g_pred: np.ndarray, coef: Coefficients) -> np.ndarray:
    """Absolute trajectory: cumulate mixed increments from ``last_y``."""
    g = np.asarray(g_pred, dtype=float)
    if g.ndim != 2 or g.shape[1] != coef.w.shape[0]:
        raise ValueError("basis matrix and coefficients disagree")
    return last_y + np.cumsum(g @ coef.w)


@dataclass(frozen=True)
class ConsistencyStats:
    within_mean: float
    within_median: float
    between_mean: float
    between_median: float
    accuracy: float
    n_excluded: int


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def coefficient_consistency(samples: dict) -> ConsistencyStats:
    """Within- vs between-patient cosine similarity of coefficient draws.

    ``samples``: patient id -> (n_i, K) array of coefficient vectors.
    Zero-norm vectors are excluded (counted). Nearest-mean assignment
    accuracy breaks ties toward the first patient id in sorted order.
    """
    ids = sorted(samples)
    if len(ids) < 2:
        raise ValueError("need at least two patients")
    cleaned = {}
    n_excluded = 0
    for pid in ids:
        arr = np.asarray(samples[pid], dtype=float)
        keep = arr[np.linalg.norm(arr, axis=1) > 0.0]
        n_excluded += len(arr) - len(keep)
        if len(keep) < 2:
            raise ValueError(f"patient {pid}: need at least two usable samples")
        cleaned[pid] = keep
    means = {pid: cleaned[pid].mean(axis=0) for pid in ids}

    within, between = [], []
    correct = total = 0
    for pid in ids:
        for w in cleaned[pid]:
            within.append(_cos(w, means[pid]))
            sims = {}
            for other in ids:
                s = _cos(w, means[other])
                sims[other] = s
                if other != pid:
                    between.append(s)
            best = max(sims.values())
            assigned = next(o for o in ids if sims[o] == best)
            correct += assigned == pid
            total += 1
    return ConsistencyStats(
        within_mean=float(np.mean(within)),
        within_median=float(np.median(within)),
        between_mean=float(np.mean(between)),
        between_median=float(np.median(between)),
        accuracy=correct / total,
        n_excluded=n_excluded,
    )


@dataclass
class PatientWindows:
    """Fit/evaluation material for one patient.

    ``contexts``: (G, y) blocks for the coefficient solve.
    ``queries``: (G, last_y, true_traj) held-out windows, disjoint from
    the contexts.
    """
    patient_id: str
    group: str
    contexts: list
    queries: list


@dataclass(frozen=True)
class AdaptationResult:
    patient_id: str
    group: str
    static_mae: float
    adapted_mae: float


def adaptation_comparison(dataset, lam: float = 1e-3):
    """Static (group-mean coefficients) vs per-patient adapted MAE."""
    solved = {}
    for pw in dataset:
        g, y = stack_contexts(pw.contexts)
        solved[pw.patient_id] = solve_coefficients(g, y, lam)
    group_means = {}
    for pw in dataset:
        group_means.setdefault(pw.group, []).append(solved[pw.patient_id].w)
    group_means = {g: np.mean(ws, axis=0) for g, ws in group_means.items()}

    results = []
    for pw in dataset:
        static = Coefficients(w=group_means[pw.group], lam=lam)
        adapted = solved[pw.patient_id]
        s_err, a_err = [], []
        for g_pred, last_y, truth in pw.queries:
            truth = np.asarray(truth, dtype=float)
            s_err.append(np.abs(predict(last_y, g_pred, static) - truth))
            a_err.append(np.abs(predict(last_y, g_pred, adapted) - truth))
        results.append(AdaptationResult(
            patient_id=pw.patient_id, group=pw.group,
            static_mae=float(np.mean(np.concatenate(s_err))),
            adapted_mae=float(np.mean(np.concatenate(a_err))),
        ))
    return results


def calibrate_forecast_model(patient, horizon: int = 24,
                             meal_grams: float = 60.0,
                             bolus_units: float = 2.0) -> rw.ProxyModel:
    """Fit the forecast model's sensitivities on probe experiments.

    Runs two quiet single-disturbance simulations on ``patient`` (one
    meal, one bolus) and reads off the carb sensitivity, the insulin
    sensitivity, the endogenous restoring rate, and the absorption
    timing. Intended to run on the training patient only; unseen
    patients are covered by coefficient adaptation, not recalibration.
    """
    from . import environment as envm

    def quiet_env(meals):
        sc = envm.ScenarioConfig(
            horizon_days=1,
            schedule=envm.ScheduleConfig(
                main_windows=tuple((t, t) for t in meals),
                main_size=(meal_grams, meal_grams),
                max_snacks=0, cohort_scale=(("child", 1.0), ("adolescent", 1.0),
                                            ("adult", 1.0)),
            ),
        ).quiet()
        return envm.GlucoseEnv(patient, sc, seed=0)

    # meal probe: rise amplitude, timing, post-peak relaxation
    env = quiet_env((720.0,))
    bgs = [env.bg]
    while not env.terminated:
        env.step((0, 0))
        bgs.append(env.bg)
    bgs = np.asarray(bgs)
    meal_step = int(720 // envm.CONTROL_MINUTES)
    seg = bgs[meal_step:meal_step + 48]    # 4 h window
    rise = seg - seg[0]
    peak_idx = int(rise.argmax())
    peak = float(rise[peak_idx])
    csf = max(peak / meal_grams, 0.2)
    t_peak_min = max(peak_idx * envm.CONTROL_MINUTES, 30.0)

    tail_end = min(peak_idx + 12, len(seg) - 1)
    k_endo = 0.0
    if tail_end > peak_idx and peak > 1.0:
        drop = float(seg[peak_idx] - seg[tail_end])
        minutes = (tail_end - peak_idx) * envm.CONTROL_MINUTES
        excess = max(float(seg[peak_idx] - patient.Gb), 1.0)
        k_endo = max(drop / minutes / excess, 0.0)

    # bolus probe: drop amplitude per unit
    env = quiet_env(())
    b_levels = np.linspace(0.0, 1.0, env.cfg.n_bolus_levels)
    b_idx = int(np.argmin(np.abs(b_levels * patient.B_max - bolus_units)))
    b_idx = max(b_idx, 1)
    units = float(b_levels[b_idx] * patient.B_max)
    start = env.bg
    given = False
    drops = [0.0]
    while not env.terminated:
        act = (b_idx, 0) if (not given and env.step_count == meal_step) else (0, 0)
        if act[0] > 0:
            given = True
        env.step(act)
        if given:
            drops.append(start - env.bg)
    isf = max(float(np.max(drops)) / units, 5.0)

    return rw.ProxyModel(
        csf=csf, isf=isf, gb=patient.Gb, beta_func=1.0, k_endo=k_endo,
        horizon=horizon,
        carb_k=rw.gamma_kernel(2.0, min(max(t_peak_min / 4.0, 20.0), 60.0)),
        ins_k=rw.insulin_kernel(),
    )


def write_coefficients_csv(path, rows):
    """``rows``: (patient_id, sample_index, w array). Stable layout
    consumed by the consistency analysis."""
    rows = list(rows)
    if not rows:
        raise ValueError("no coefficient rows to write")
    k = len(rows[0][2])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "sample_index"]
                        + [f"w{i}" for i in range(k)])
        for pid, idx, w in rows:
            writer.writerow([pid, idx] + [format(float(v), ".10g") for v in w])


def read_coefficients_csv(path) -> dict:
    samples = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty coefficient file")
        w_cols = [c for c in reader.fieldnames if c.startswith("w")]
        for row in reader:
            w = np.array([float(row[c]) for c in w_cols])
            samples.setdefault(row["patient_id"], []).append(w)
    return {pid: np.vstack(ws) for pid, ws in samples.items()}
