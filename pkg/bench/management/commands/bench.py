import time
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from bench.cli import add_estimator_arguments, add_scenario_arguments, estimator_options, load_scenario
from bench.dataio import write_json, write_rows_csv
from bench.harness import AGGREGATE_COLUMNS, TRIAL_COLUMNS, run_monte_carlo
from bench.models import save_sweep
from bench.scenarios import RNG_NAME, ScenarioError, apply_point

AGGREGATION_NOTE = (
    "nmse_x_db and nmse_theta_db are 10*log10 of the mean linear error ratio over successful trials; "
    "median_nmse_theta_db is the median of per-trial dB values; p_* are fractions of successful trials"
)


class Command(BaseCommand):
    help = "Run a Monte Carlo sweep and write aggregate (and optionally per-trial) CSV and JSON files."

    def add_arguments(self, parser):
        add_scenario_arguments(parser)
        parser.add_argument("--output-dir", default=None, help="Directory for result files (default: BENCH_OUTPUT_DIR).")
        parser.add_argument("--name", default=None, help="Base name of the result files (default: scenario name).")
        parser.add_argument("--per-trial", action="store_true", help="Also write one row per trial.")
        parser.add_argument("--workers", type=int, default=None, help="Trial threads (default: BENCH_WORKERS).")
        parser.add_argument("--seed", type=int, default=None, help="Override the scenario seed.")
        parser.add_argument("--trials", type=int, default=None, help="Override the number of trials per point.")
        parser.add_argument("--save", action="store_true", help="Store the sweep in the database as well.")
        parser.add_argument("--no-timing", action="store_true",
                            help="Write zero runtimes so repeated runs produce identical files.")
        add_estimator_arguments(parser)

    def handle(self, *args, **options):
        cfg, sweep = load_scenario(options)
        changes = {}
        if options["seed"] is not None:
            changes["rng_seed"] = options["seed"]
        elif not options.get("config"):
            changes["rng_seed"] = getattr(settings, "BENCH_DEFAULT_SEED", cfg.rng_seed)
        if options["trials"] is not None:
            changes["trials"] = options["trials"]
        try:
            cfg = apply_point(cfg, changes)
        except ScenarioError as exc:
            raise CommandError(str(exc)) from exc

        workers = options["workers"] or getattr(settings, "BENCH_WORKERS", 1)
        timing = not options["no_timing"]
        estimator = estimator_options(options)
        output_dir = Path(options["output_dir"] or getattr(settings, "BENCH_OUTPUT_DIR", "bench_results"))
        name = options["name"] or cfg.name

        self.stdout.write(f"Sweep {name}: {cfg.trials} trial(s) per point on {workers} worker(s)")
        started_at = time.perf_counter()
        try:
            rows = run_monte_carlo(cfg, sweep, estimator, workers=workers, timing=timing)
        except ScenarioError as exc:
            raise CommandError(str(exc)) from exc

        sweep_keys = list(sweep)
        try:
            output_dir.mkdir(parents=True, exist_ok=True)
            write_rows_csv(output_dir / f"{name}.csv", sweep_keys + list(AGGREGATE_COLUMNS),
                           [row.as_row() for row in rows])
            if options["per_trial"]:
                trial_rows = []
                for row in rows:
                    for result in row.results:
                        trial_rows.append({**row.point, **result.as_row()})
                write_rows_csv(output_dir / f"{name}.trials.csv", sweep_keys + list(TRIAL_COLUMNS), trial_rows)
            write_json(output_dir / f"{name}.json", {
                "name": name,
                "scenario": cfg.as_dict(),
                "sweep": sweep,
                "seed": cfg.rng_seed,
                "rng": RNG_NAME,
                "trials": cfg.trials,
                "timing": timing,
                "aggregation": AGGREGATION_NOTE,
                "units": {"nmse_x_db": "dB", "nmse_theta_db": "dB", "median_nmse_theta_db": "dB", "runtime": "s"},
                "columns": sweep_keys + list(AGGREGATE_COLUMNS),
                "rows": [row.as_row() for row in rows],
            })
        except OSError as exc:
            raise CommandError(f"cannot write results to {output_dir}: {exc}") from exc

        if options["save"]:
            run = save_sweep(name, cfg, sweep, rows, RNG_NAME, workers=workers, per_trial=options["per_trial"])
            self.stdout.write(f"Saved as benchmark run {run.pk}")

        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(rows)} row(s) to {output_dir / (name + '.csv')} in {time.perf_counter() - started_at:.1f}s"
        ))
