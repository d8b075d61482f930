"""Argument and report helpers shared by the management commands."""

from __future__ import annotations

import numpy as np
from django.core.management.base import CommandError

from estimation.engine import EstimatorOptions
from estimation.model import PriorMatching

from .dataio import ConfigError, read_key_value_config
from .metrics import doa_from_theta
from .scenarios import scenario_from_config

REPORT_UNITS = {
    "thetas": "rad",
    "concentrations": "1",
    "doa_degrees": "deg",
    "nu": "power per sample",
    "tau": "power per weight",
}


def add_estimator_arguments(parser) -> None:
    group = parser.add_argument_group("estimator")
    group.add_argument("--tolerance", type=float, default=None,
                       help="Relative change of X_hat that ends the iteration (default: settings).")
    group.add_argument("--max-iters", type=int, default=None, dest="max_iterations",
                       help="Iteration cap (default: settings).")
    group.add_argument("--no-deactivate", action="store_true",
                       help="Support search only activates components.")
    group.add_argument("--prior-matching", choices=[m.value for m in PriorMatching], default=None,
                       help="How initialization hands priors to components.")


def estimator_options(options: dict) -> EstimatorOptions:
    matching = options.get("prior_matching")
    try:
        return EstimatorOptions.from_settings(
            tolerance=options.get("tolerance"),
            max_iterations=options.get("max_iterations"),
            deactivate=False if options.get("no_deactivate") else None,
            prior_matching=PriorMatching(matching) if matching else None,
        )
    except ValueError as exc:
        raise CommandError(str(exc)) from exc


def add_scenario_arguments(parser) -> None:
    parser.add_argument("config", nargs="?", help="Scenario/sweep config file (key = value).")
    parser.add_argument("--preset", help="Named scenario preset instead of (or under) a config file.")


def load_scenario(options: dict):
    """``(ScenarioConfig, sweep)`` from ``--preset`` and/or a config file."""
    try:
        entries = {}
        if options.get("preset"):
            entries["preset"] = options["preset"]
        if options.get("config"):
            entries.update(read_key_value_config(options["config"]))
        if not entries:
            raise CommandError("give a config file or --preset")
        return scenario_from_config(entries)
    except ConfigError as exc:
        detail = f" (key {exc.key!r})" if exc.key else ""
        raise CommandError(f"invalid config: {exc}{detail}") from exc
    except OSError as exc:
        raise CommandError(f"cannot read config: {exc}") from exc


def build_report(estimate, M: int, L: int, N: int, groups: int = 1, doa: bool = False) -> dict:
    report = {
        "units": dict(REPORT_UNITS),
        "M": M,
        "L": L,
        "N": N,
        "groups": groups,
        "K_hat": estimate.K_hat,
        "thetas": [float(t) for t in estimate.thetas],
        "concentrations": [float(k) for k in estimate.concentrations],
        "components": list(estimate.active),
        "weights": np.asarray(estimate.weights),
        "nu": estimate.hyper.nu,
        "tau": estimate.hyper.tau,
        "lambda": estimate.hyper.lambda_,
        "iterations": estimate.iterations,
        "converged": estimate.converged,
    }
    if doa:
        report["doa_degrees"] = [float(d) for d in doa_from_theta(estimate.thetas)]
    return report
