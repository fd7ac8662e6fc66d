"""Episode loop and the ID-vs-OOD benchmark harness.

The benchmark trains nothing: baseline controllers run zero-shot on the
designated training patient (in-distribution) and on the remaining
cohort members (out-of-distribution), with and without shields, and the
harness aggregates clinical metrics, generalization gaps, shield
deltas, and the reward/cost correlation checks into CSV reports.
"""

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import environment as envm
from . import forecaster as fc
from . import metrics as mt
from . import patients as pt
from . import policies as pol
from . import rewards as rw
from . import shield as sh


def summarize_record(record: envm.EpisodeRecord, use_cgm: bool = False) -> mt.ClinicalSummary:
    trace = record.cgm if use_cgm else record.bg
    return mt.summarize(trace, reward_sum=sum(record.reward),
                        cost_sum=sum(record.cost))


def run_episode(patient, policy, shield_mode, scenario, seed,
                shield_cfg: sh.ShieldConfig = None, select: str = "argmax",
                shield_log_path=None, collect_coeffs: bool = False,
                forecast_model: rw.ProxyModel = None):
    """Full control loop: observe, policy logits, shield, act, step.

    ``forecast_model`` seeds the predictive shield's forecaster; when
    omitted it is probe-calibrated on ``patient`` itself. Returns
    (EpisodeRecord, ClinicalSummary[, coefficient snapshots]).
    """
    if shield_mode not in ("none", "rule_based", "predictive"):
        raise ValueError(f"unknown shield mode {shield_mode!r}")
    env = envm.GlucoseEnv(patient, scenario, seed)
    space = sh.space_for(patient, scenario.n_bolus_levels,
                         scenario.n_meal_levels)
    shield_cfg = shield_cfg or sh.ShieldConfig()
    forecaster = None
    pshield = None
    if shield_mode == "predictive":
        if forecast_model is None:
            forecast_model = fc.calibrate_forecast_model(patient)
        forecaster = sh.AdaptiveForecaster(forecast_model,
                                           drain_g_min=scenario.carb_drain_g_min)
        pshield = sh.PredictiveShield(shield_cfg, space, forecaster)

    rng_select = np.random.default_rng(seed ^ 0x5EED)
    obs = env.observe()
    coeffs = []
    log_fh = open(shield_log_path, "w") if shield_log_path else None
    try:
        while not env.terminated:
            logits = np.asarray(policy(obs), dtype=float).reshape(space.shape)
            mode = ""
            if shield_mode == "rule_based":
                masked, rule = sh.rule_based_shield(obs, logits, space)
                mode = rule
                probs = sh.softmax(masked)
            elif shield_mode == "predictive":
                inputs = env.proxy_inputs(
                    include_scheduled=True,
                    horizon_minutes=shield_cfg.horizon * envm.CONTROL_MINUTES)
                inputs.bg0 = obs.cgm
                forecaster.observe_step(inputs, obs.cgm)
                masked, decision = pshield(obs, logits)
                mode = decision.mode
                probs = decision.probs
                if log_fh is not None:
                    log_fh.write(decision.to_json() + "\n")
                if collect_coeffs:
                    snap = forecaster.coefficient_snapshot()
                    if snap is not None:
                        coeffs.append(snap)
            else:
                probs = sh.softmax(logits)

            if select == "argmax":
                flat = int(np.argmax(probs))
            elif select == "sample":
                flat = int(rng_select.choice(probs.size, p=probs.ravel()))
            else:
                raise ValueError(f"unknown selection rule {select!r}")
            b_idx, m_idx = np.unravel_index(flat, space.shape)
            obs, _, _, _, _ = env.step((int(b_idx), int(m_idx)),
                                       shield_mode=mode)
    finally:
        if log_fh is not None:
            log_fh.close()

    summary = summarize_record(env.record)
    if collect_coeffs:
        return env.record, summary, coeffs
    return env.record, summary


@dataclass(frozen=True)
class BenchmarkConfig:
    diabetes_types: tuple = ("t1d", "t2d_pump", "t2d_no_pump")
    cohorts: tuple = ("adult",)
    policies: tuple = ("heuristic",)
    shield_modes: tuple = ("none", "rule_based", "predictive")
    seeds: tuple = (1, 2, 3)
    train_patient_index: int = 1
    eval_patient_indices: tuple = tuple(range(2, 11))
    horizon_days: int = 7
    out_dir: str = "bench_out"
    select: str = "argmax"
    save_traces: bool = True
    table_path: str = ""

    def validate(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.train_patient_index in self.eval_patient_indices:
            raise ValueError("training patient must not be in the eval set")
        for m in self.shield_modes:
            if m not in ("none", "rule_based", "predictive"):
                raise ValueError(f"unknown shield mode {m!r}")
        return self

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                v = data[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs).validate()

    def to_dict(self):
        out = dataclasses.asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in out.items()}


def _stable_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode())


def _policy_spec(name: str) -> pol.PolicySpec:
    if name == "heuristic":
        return pol.PolicySpec(kind="heuristic")
    if name == "random":
        return pol.PolicySpec(kind="random")
    if name == "constant":
        return pol.PolicySpec(kind="constant")
    raise ValueError(f"unknown policy name {name!r}")


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


RUN_COLUMNS = ("policy", "diabetes_type", "cohort", "patient", "split",
               "shield", "seed", "tir_pct", "cv_pct", "mean_risk_index",
               "hypo_event_pct", "hyper_event_pct", "reward_sum", "cost_sum",
               "terminated_early")

SUMMARY_FIELDS = ("tir_pct", "cv_pct", "mean_risk_index", "hypo_event_pct",
                  "hyper_event_pct", "reward_sum", "cost_sum")


def run_benchmark(cfg: BenchmarkConfig, progress=None):
    """Execute the full grid and write the report files.

    Output is a pure function of (config, patient table): reruns with
    the same inputs produce byte-identical CSVs.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces_dir = out / "traces"
    if cfg.save_traces:
        traces_dir.mkdir(exist_ok=True)

    table_path = Path(cfg.table_path) if cfg.table_path else pt.default_table_path()
    base_records = {p.id: p for p in pt.load_cohort(table_path)}
    table_hash = hashlib.sha256(table_path.read_bytes()).hexdigest()
    with open(out / "config.json", "w") as fh:
        json.dump({"config": cfg.to_dict(), "patient_table_sha256": table_hash},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")

    patient_ids = [cfg.train_patient_index] + list(cfg.eval_patient_indices)
    scenario = envm.ScenarioConfig(horizon_days=cfg.horizon_days)
    rows = []
    failures = []
    for policy_name in cfg.policies:
        for dtype in cfg.diabetes_types:
            for cohort in cfg.cohorts:
                prepared = {}
                for idx in patient_ids:
                    pid = f"{cohort}#{idx:02d}"
                    prepared[idx] = pt.prepare_patient(base_records[pid], dtype)
                # everything learnable is fit on the training patient:
                # controller calibration and the shield's forecast model;
                # evaluation patients are strictly zero-shot
                train_patient = prepared[cfg.train_patient_index]
                train_space = sh.space_for(train_patient,
                                           scenario.n_bolus_levels,
                                           scenario.n_meal_levels)
                forecast_model = None
                if "predictive" in cfg.shield_modes:
                    forecast_model = fc.calibrate_forecast_model(train_patient)
                for shield_mode in cfg.shield_modes:
                    for seed in cfg.seeds:
                        for idx in patient_ids:
                            patient = prepared[idx]
                            split = "id" if idx == cfg.train_patient_index else "ood"
                            env_seed = _stable_seed(dtype, cohort, idx, seed)
                            policy = pol.make_policy(
                                _policy_spec(policy_name), train_space,
                                train_patient,
                                seed=_stable_seed(policy_name, dtype, cohort,
                                                  idx, seed))
                            tag = (f"{policy_name}_{dtype}_{cohort}{idx:02d}"
                                   f"_{shield_mode}_s{seed}")
                            try:
                                record, summary = run_episode(
                                    patient, policy, shield_mode, scenario,
                                    env_seed, select=cfg.select,
                                    forecast_model=forecast_model)
                            except Exception as exc:  # partial failure
                                failures.append((tag, repr(exc)))
                                continue
                            if cfg.save_traces:
                                record.write_csv(traces_dir / f"{tag}.csv")
                            rows.append((
                                policy_name, dtype, cohort, patient.id, split,
                                shield_mode, seed, summary.tir_pct,
                                summary.cv_pct, summary.mean_risk_index,
                                summary.hypo_event_pct, summary.hyper_event_pct,
                                summary.reward_sum, summary.cost_sum,
                                int(record.termination_reason != envm.TERM_TIME),
                            ))
                            if progress:
                                progress(tag, summary)

    _write_csv(out / "runs.csv", RUN_COLUMNS, rows)
    _write_summary(out, rows)
    _write_gap(out, rows)
    _write_shield_delta(out, rows)
    _write_correlations(out, rows)
    if failures:
        _write_csv(out / "failures.csv", ("run", "error"), failures)
    _write_text_summary(out, rows, failures)
    return rows


def _group(rows, keys):
    idx = {name: i for i, name in enumerate(RUN_COLUMNS)}
    groups = {}
    for row in rows:
        key = tuple(row[idx[k]] for k in keys)
        groups.setdefault(key, []).append(row)
    return groups, idx


def _mean_of(group, idx, field_name):
    return float(np.mean([r[idx[field_name]] for r in group]))


def _std_of(group, idx, field_name):
    return float(np.std([r[idx[field_name]] for r in group]))


def _write_summary(out, rows):
    groups, idx = _group(rows, ("policy", "diabetes_type", "cohort",
                                "shield", "split"))
    header = ["policy", "diabetes_type", "cohort", "shield", "split", "n"]
    for f in SUMMARY_FIELDS:
        header += [f + "_mean", f + "_std"]
    table = []
    for key in sorted(groups):
        g = groups[key]
        row = list(key) + [len(g)]
        for f in SUMMARY_FIELDS:
            row += [_mean_of(g, idx, f), _std_of(g, idx, f)]
        table.append(tuple(row))
    _write_csv(out / "summary.csv", header, table)


def _write_gap(out, rows):
    groups, idx = _group(rows, ("policy", "diabetes_type", "cohort", "shield",
                                "split"))
    header = ("policy", "diabetes_type", "cohort", "shield",
              "id_tir", "ood_tir", "delta_tir",
              "id_risk", "ood_risk", "delta_risk")
    table = []
    combos = sorted({k[:4] for k in groups})
    for combo in combos:
        gid = groups.get(combo + ("id",))
        good = groups.get(combo + ("ood",))
        if not gid or not good:
            continue
        id_tir = _mean_of(gid, idx, "tir_pct")
        ood_tir = _mean_of(good, idx, "tir_pct")
        id_risk = _mean_of(gid, idx, "mean_risk_index")
        ood_risk = _mean_of(good, idx, "mean_risk_index")
        table.append(combo + (id_tir, ood_tir, ood_tir - id_tir,
                              id_risk, ood_risk, ood_risk - id_risk))
    _write_csv(out / "gap.csv", header, table)


def _write_shield_delta(out, rows):
    groups, idx = _group(rows, ("policy", "diabetes_type", "cohort", "shield"))
    header = ("policy", "diabetes_type", "cohort", "shield",
              "delta_tir", "delta_risk", "delta_cv",
              "delta_hypo_pct", "delta_hyper_pct")
    table = []
    combos = sorted({k[:3] for k in groups})
    for combo in combos:
        base = groups.get(combo + ("none",))
        if not base:
            continue
        for key in sorted(groups):
            if key[:3] != combo or key[3] == "none":
                continue
            g = groups[key]
            table.append(combo + (key[3],
                _mean_of(g, idx, "tir_pct") - _mean_of(base, idx, "tir_pct"),
                _mean_of(g, idx, "mean_risk_index") - _mean_of(base, idx, "mean_risk_index"),
                _mean_of(g, idx, "cv_pct") - _mean_of(base, idx, "cv_pct"),
                _mean_of(g, idx, "hypo_event_pct") - _mean_of(base, idx, "hypo_event_pct"),
                _mean_of(g, idx, "hyper_event_pct") - _mean_of(base, idx, "hyper_event_pct"),
            ))
    _write_csv(out / "shield_delta.csv", header, table)


def _write_correlations(out, rows):
    """Reward-vs-TIR and cost-vs-risk alignment across episodes."""
    idx = {name: i for i, name in enumerate(RUN_COLUMNS)}
    table = []
    by_policy = {}
    for row in rows:
        by_policy.setdefault(row[idx["policy"]], []).append(row)
    for policy in sorted(by_policy):
        g = by_policy[policy]
        if len(g) < 3:
            continue
        rewards = [r[idx["reward_sum"]] for r in g]
        tirs = [r[idx["tir_pct"]] for r in g]
        costs = [r[idx["cost_sum"]] for r in g]
        risks = [r[idx["mean_risk_index"]] for r in g]
        try:
            r_rt = mt.pearson(rewards, tirs)
            r_cr = mt.pearson(costs, risks)
        except ValueError:
            continue
        table.append((policy, len(g), r_rt, r_cr))
    _write_csv(out / "correlations.csv",
               ("policy", "n_episodes", "reward_tir_r", "cost_risk_r"), table)


def _write_text_summary(out, rows, failures):
    idx = {name: i for i, name in enumerate(RUN_COLUMNS)}
    lines = [f"benchmark runs: {len(rows)}", f"failures: {len(failures)}"]
    groups, _ = _group(rows, ("diabetes_type", "shield", "split"))
    for key in sorted(groups):
        g = groups[key]
        lines.append(
            f"{key[0]:12s} shield={key[1]:10s} {key[2]}: "
            f"TIR {_mean_of(g, idx, 'tir_pct'):6.2f}  "
            f"risk {_mean_of(g, idx, 'mean_risk_index'):6.2f}  "
            f"hypo {_mean_of(g, idx, 'hypo_event_pct'):5.2f}%  "
            f"hyper {_mean_of(g, idx, 'hyper_event_pct'):5.2f}%")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
