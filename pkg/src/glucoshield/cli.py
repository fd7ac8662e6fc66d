"""Command-line surface: single episodes, the benchmark grid, the
reliability-bound Monte Carlo, and coefficient analysis."""

import json
from pathlib import Path

import click
import numpy as np

from . import environment as envm
from . import forecaster as fc
from . import patients as pt
from . import policies as pol
from . import runner as rn
from . import shield as sh


@click.group()
def main():
    """Glucose simulation engine, safety shields, and OOD benchmark."""


@main.command()
@click.option("--patient", "patient_id", default="adult#01", show_default=True)
@click.option("--type", "dtype", default="t1d", show_default=True,
              type=click.Choice(pt.DIABETES_TYPES))
@click.option("--policy", default="heuristic", show_default=True,
              type=click.Choice(["heuristic", "random", "constant"]))
@click.option("--shield", default="none", show_default=True,
              type=click.Choice(["none", "rule_based", "predictive"]))
@click.option("--days", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="", help="Directory for trace/log output.")
def simulate(patient_id, dtype, policy, shield, days, seed, out):
    """Run one episode and print its clinical summary."""
    patient = pt.get_patient(patient_id, dtype)
    scenario = envm.ScenarioConfig(horizon_days=days)
    space = sh.space_for(patient, scenario.n_bolus_levels,
                         scenario.n_meal_levels)
    pol_obj = pol.make_policy(rn._policy_spec(policy), space, patient, seed)
    log_path = None
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        if shield == "predictive":
            log_path = Path(out) / "shield_log.jsonl"
    record, summary = rn.run_episode(patient, pol_obj, shield, scenario,
                                     seed, shield_log_path=log_path)
    if out:
        record.write_csv(Path(out) / "episode.csv")
    click.echo(f"patient {patient.id} ({dtype}), {days} day(s), "
               f"policy={policy}, shield={shield}")
    click.echo(f"  TIR {summary.tir_pct:.2f}%  CV {summary.cv_pct:.2f}%  "
               f"risk {summary.mean_risk_index:.2f}")
    click.echo(f"  hypo {summary.hypo_event_pct:.2f}%  "
               f"hyper {summary.hyper_event_pct:.2f}%")
    click.echo(f"  reward {summary.reward_sum:.2f}  cost {summary.cost_sum:.2f}")
    if record.termination_reason != envm.TERM_TIME:
        click.echo(f"  terminated early: {record.termination_reason}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def benchmark(config_path):
    """Run the ID-vs-OOD benchmark grid from a JSON config."""
    cfg = rn.BenchmarkConfig.from_json(config_path)

    def progress(tag, summary):
        click.echo(f"  {tag}: TIR {summary.tir_pct:.1f}%")

    rows = rn.run_benchmark(cfg, progress=progress)
    click.echo(f"wrote {len(rows)} runs to {cfg.out_dir}")
    click.echo((Path(cfg.out_dir) / "summary.txt").read_text(), nl=False)


@main.command("verify-theorem")
@click.option("--epsilon", default=5.0, show_default=True)
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--trials", default=10000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def verify_theorem(epsilon, alpha, trials, seed):
    """Monte Carlo check of the shield reliability bound, both sides,
    plus the adversarial negative control."""
    rng = np.random.default_rng(seed)
    for side in ("hypo", "hyper"):
        oracle = sh.make_synthetic_oracle(side)
        rep = sh.verify_reliability_bound(
            oracle, sh.make_reliable_predictor(epsilon, alpha, side),
            epsilon, alpha, trials, rng, side=side)
        click.echo(rep.line())
        neg = sh.verify_reliability_bound(
            oracle, sh.make_adversarial_predictor(epsilon, side),
            epsilon, alpha, trials, rng, side=side)
        click.echo("  negative control: " + neg.line())


@main.command("analyze-coeffs")
@click.option("--input", "input_path", required=True,
              type=click.Path(exists=True))
def analyze_coeffs(input_path):
    """Within/between-patient consistency of exported coefficients."""
    samples = fc.read_coefficients_csv(input_path)
    stats = fc.coefficient_consistency(samples)
    click.echo(json.dumps({
        "patients": len(samples),
        "within_mean": round(stats.within_mean, 4),
        "within_median": round(stats.within_median, 4),
        "between_mean": round(stats.between_mean, 4),
        "between_median": round(stats.between_median, 4),
        "nearest_mean_accuracy": round(stats.accuracy, 4),
        "excluded_zero_norm": stats.n_excluded,
    }, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
