from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from bench.cli import add_scenario_arguments, load_scenario
from bench.dataio import codec_for_path, write_json
from bench.scenarios import RNG_NAME, ScenarioError, apply_point, generate_trial, trial_rng


def sidecar_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".truth.json")


class Command(BaseCommand):
    help = "Write one synthetic trial to a data file plus a '<output>.truth.json' ground-truth sidecar."

    def add_arguments(self, parser):
        add_scenario_arguments(parser)
        parser.add_argument("output", help="Data file to write (.csv or .mvls).")
        parser.add_argument("--seed", type=int, default=None, help="Scenario seed (default: config, then settings).")
        parser.add_argument("--trial", type=int, default=0, help="Trial index within the seed's stream.")
        parser.add_argument("--format", choices=["csv", "binary"], default=None,
                            help="Output format (default: from the file suffix).")

    def handle(self, *args, **options):
        cfg, _ = load_scenario(options)
        seed = options["seed"]
        if seed is None:
            seed = cfg.rng_seed if options.get("config") else getattr(settings, "BENCH_DEFAULT_SEED", cfg.rng_seed)
        cfg = apply_point(cfg, {"rng_seed": seed})
        trial = options["trial"]
        if trial < 0:
            raise CommandError("--trial must be nonnegative")

        try:
            measurements, truth = generate_trial(cfg, trial_rng(seed, trial), trial=trial)
        except ScenarioError as exc:
            raise CommandError(str(exc)) from exc

        output = Path(options["output"])
        output.parent.mkdir(parents=True, exist_ok=True)
        codec = codec_for_path(output, options["format"], sniff=False)
        try:
            codec.write(output, measurements.Y)
            write_json(sidecar_path(output), {
                "scenario": cfg.name,
                "seed": seed,
                "trial": trial,
                "rng": RNG_NAME,
                "format": codec.name,
                "M": measurements.M,
                "L": measurements.L,
                "K": truth.K,
                "thetas": truth.thetas,
                "W": truth.W,
                "nu": truth.noise_variance,
                "snr_db": truth.snr_db,
                "units": {"thetas": "rad", "snr_db": "dB", "nu": "power per sample"},
            })
        except OSError as exc:
            raise CommandError(f"cannot write {output}: {exc}") from exc

        self.stdout.write(self.style.SUCCESS(
            f"Wrote {measurements.M}x{measurements.L} {codec.name} trial (K={truth.K}) to {output}"
        ))
