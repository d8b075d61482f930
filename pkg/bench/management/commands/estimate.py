import json
import logging

from django.core.management.base import BaseCommand, CommandError

from bench.cli import add_estimator_arguments, build_report, estimator_options
from bench.dataio import DataFormatError, codec_for_path, read_priors, to_jsonable, write_json
from estimation.engine import EstimatorFailure, run
from estimation.model import MeasurementSet, PriorConfig
from estimation.parallel import run_parallel
from estimation.sequential import partition, run_sequential

logger = logging.getLogger(__name__)

DEFAULT_KAPPA0 = 1e4


class Command(BaseCommand):
    help = (
        "Estimate frequencies, weights and model order from a data file. "
        "CSV input has M rows and 2L columns (re_0, im_0, re_1, im_1, ...); "
        "binary MVLS files are detected by their magic bytes. See FORMATS.md."
    )

    def add_arguments(self, parser):
        parser.add_argument("input", help="CSV or MVLS data file.")
        parser.add_argument("--output", help="JSON report path (default: stdout).")
        parser.add_argument("--format", choices=["csv", "binary"], default=None,
                            help="Input format (default: detect).")
        parser.add_argument("--prior", choices=["none", "grid", "file"], default="none",
                            help="Frequency priors: uninformative, evenly spaced grid, or from --prior-file.")
        parser.add_argument("--prior-file", help="JSON list of {mean_direction, concentration}.")
        parser.add_argument("--kappa0", type=float, default=DEFAULT_KAPPA0,
                            help="Concentration of the grid priors.")
        parser.add_argument("--components", type=int, default=None,
                            help="Number of candidate components N (default: M).")
        parser.add_argument("--groups", type=int, default=1,
                            help="Estimate sequentially over this many snapshot groups.")
        parser.add_argument("--carry-hyperparams", action="store_true",
                            help="Start each group from the previous group's hyperparameters.")
        parser.add_argument("--workers", type=int, default=1,
                            help="Threads for the per-snapshot sums.")
        parser.add_argument("--doa", action="store_true",
                            help="Also report directions of arrival in degrees (theta = pi sin(phi)).")
        add_estimator_arguments(parser)

    def handle(self, *args, **options):
        path = options["input"]
        try:
            Y = codec_for_path(path, options["format"]).read(path)
            measurements = MeasurementSet(Y)
        except DataFormatError as exc:
            raise CommandError(f"{path}: {exc}") from exc
        except (OSError, ValueError) as exc:
            raise CommandError(f"cannot read {path}: {exc}") from exc

        priors = self._priors(options, measurements.M)
        estimator = estimator_options(options)
        workers = max(1, int(options["workers"]))
        groups = int(options["groups"])

        try:
            if groups > 1:
                plan = partition(measurements.L, groups)
                estimate = run_sequential(measurements, priors, plan, estimator,
                                          carry_hyperparams=options["carry_hyperparams"], workers=workers)
            elif workers > 1:
                estimate = run_parallel(measurements, priors, estimator, workers=workers)
            else:
                estimate = run(measurements, priors, estimator)
        except EstimatorFailure as exc:
            raise CommandError(f"estimation failed: {exc}") from exc
        except ValueError as exc:
            raise CommandError(str(exc)) from exc

        report = build_report(estimate, measurements.M, measurements.L, priors.N, groups, options["doa"])
        if options["output"]:
            write_json(options["output"], report)
            self.stdout.write(self.style.SUCCESS(
                f"K_hat={estimate.K_hat} after {estimate.iterations} iteration(s); report written to {options['output']}"
            ))
        else:
            self.stdout.write(json.dumps(to_jsonable(report), indent=2, sort_keys=True))

    def _priors(self, options, M):
        N = options["components"] or M
        if N < 1:
            raise CommandError("--components must be positive")
        kind = options["prior"]
        if kind == "grid":
            return PriorConfig.grid(N, options["kappa0"])
        if kind == "file":
            if not options["prior_file"]:
                raise CommandError("--prior file needs --prior-file")
            try:
                priors = read_priors(options["prior_file"])
            except (DataFormatError, OSError) as exc:
                raise CommandError(f"{options['prior_file']}: {exc}") from exc
            logger.info("loaded %d prior(s) from %s", len(priors), options["prior_file"])
            return PriorConfig(tuple(priors))
        return PriorConfig.uninformative(N)
