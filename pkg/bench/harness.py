"""Monte Carlo harness.

For every point of a sweep the trials of the scenario are run on a pool of
threads (``asyncio.to_thread`` bounded by a semaphore) and gathered back in
trial order, so the aggregate rows only depend on the seed.
"""

from __future__ import annotations

import asyncio
import logging
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from estimation.engine import EstimatorFailure, EstimatorOptions, run
from estimation.sequential import partition, run_sequential

from .metrics import frequency_error_ratio, signal_error_ratio, to_db
from .scenarios import ScenarioConfig, apply_point, build_priors, generate_trial, sweep_points, trial_rng

logger = logging.getLogger(__name__)

AGGREGATE_COLUMNS = (
    "trials",
    "failures",
    "nmse_x_db",
    "nmse_theta_db",
    "median_nmse_theta_db",
    "p_correct",
    "p_over",
    "p_under",
    "runtime",
)
TRIAL_COLUMNS = (
    "trial",
    "K",
    "K_hat",
    "nmse_x_db",
    "nmse_theta_db",
    "order_correct",
    "order_over",
    "order_under",
    "runtime",
    "failed",
    "true_thetas",
    "est_thetas",
)


@dataclass(frozen=True)
class TrialResult:
    trial: int
    true_thetas: tuple[float, ...]
    est_thetas: tuple[float, ...]
    K: int
    K_hat: int
    signal_ratio: float
    theta_ratio: float
    runtime_seconds: float
    failed: bool = False
    error: str = ""

    @property
    def nmse_x_db(self) -> float:
        return to_db(self.signal_ratio)

    @property
    def nmse_theta_db(self) -> float:
        return to_db(self.theta_ratio)

    @property
    def order_correct(self) -> bool:
        return not self.failed and self.K_hat == self.K

    @property
    def order_over(self) -> bool:
        return not self.failed and self.K_hat > self.K

    @property
    def order_under(self) -> bool:
        return not self.failed and self.K_hat < self.K

    def as_row(self) -> dict:
        return {
            "trial": self.trial,
            "K": self.K,
            "K_hat": self.K_hat,
            "nmse_x_db": self.nmse_x_db,
            "nmse_theta_db": self.nmse_theta_db,
            "order_correct": self.order_correct,
            "order_over": self.order_over,
            "order_under": self.order_under,
            "runtime": self.runtime_seconds,
            "failed": self.failed,
            "true_thetas": ";".join(repr(float(t)) for t in self.true_thetas),
            "est_thetas": ";".join(repr(float(t)) for t in self.est_thetas),
        }


def _ratio_or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except ValueError:
        return math.nan


def run_trial(cfg: ScenarioConfig, trial: int, options: EstimatorOptions | None = None,
              timing: bool = True) -> TrialResult:
    """Generate and estimate one trial.  Estimator failures are recorded, not raised."""
    measurements, truth = generate_trial(cfg, trial_rng(cfg.rng_seed, trial), trial=trial)
    priors = build_priors(cfg)
    started_at = time.perf_counter()
    try:
        if cfg.groups > 1:
            plan = partition(cfg.L, cfg.groups)
            estimate = run_sequential(measurements, priors, plan, options, cfg.carry_hyperparams)
            # The sequential estimate reconstructs the last group only.
            start, stop = plan.bounds()[-1]
            X_true = truth.X[:, start:stop]
        else:
            estimate = run(measurements, priors, options)
            X_true = truth.X
    except EstimatorFailure as exc:
        logger.warning("trial %d of %r failed: %s", trial, cfg.name, exc)
        return TrialResult(
            trial=trial,
            true_thetas=tuple(truth.thetas.tolist()),
            est_thetas=(),
            K=truth.K,
            K_hat=0,
            signal_ratio=math.nan,
            theta_ratio=math.nan,
            runtime_seconds=time.perf_counter() - started_at if timing else 0.0,
            failed=True,
            error=str(exc),
        )
    runtime = time.perf_counter() - started_at if timing else 0.0
    return TrialResult(
        trial=trial,
        true_thetas=tuple(truth.thetas.tolist()),
        est_thetas=tuple(estimate.thetas.tolist()),
        K=truth.K,
        K_hat=estimate.K_hat,
        signal_ratio=_ratio_or_nan(signal_error_ratio, estimate.X_hat, X_true),
        theta_ratio=_ratio_or_nan(frequency_error_ratio, estimate.thetas, estimate.concentrations, truth.thetas),
        runtime_seconds=runtime,
    )


@dataclass(frozen=True)
class AggregateRow:
    point: dict
    trials: int
    failures: int
    nmse_x_db: float
    nmse_theta_db: float
    median_nmse_theta_db: float
    p_correct: float
    p_over: float
    p_under: float
    runtime: float
    results: tuple[TrialResult, ...] = ()

    def as_row(self) -> dict:
        row = dict(self.point)
        row.update({column: getattr(self, column) for column in AGGREGATE_COLUMNS})
        return row


def _mean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def aggregate(point: dict, results) -> AggregateRow:
    """dB of mean linear ratios, plus the median of per-trial frequency dB."""
    results = tuple(results)
    ok = [r for r in results if not r.failed]
    count = len(ok)
    theta_db = [r.nmse_theta_db for r in ok if not math.isnan(r.theta_ratio)]
    return AggregateRow(
        point=dict(point),
        trials=len(results),
        failures=len(results) - count,
        nmse_x_db=to_db(_mean([r.signal_ratio for r in ok])),
        nmse_theta_db=to_db(_mean([r.theta_ratio for r in ok])),
        median_nmse_theta_db=statistics.median(theta_db) if theta_db else math.nan,
        p_correct=sum(r.order_correct for r in ok) / count if count else math.nan,
        p_over=sum(r.order_over for r in ok) / count if count else math.nan,
        p_under=sum(r.order_under for r in ok) / count if count else math.nan,
        runtime=_mean([r.runtime_seconds for r in ok]),
        results=results,
    )


async def _run_point(cfg: ScenarioConfig, options: EstimatorOptions, workers: int, timing: bool):
    semaphore = asyncio.Semaphore(max(1, workers))

    async def one(trial: int) -> TrialResult:
        async with semaphore:
            return await asyncio.to_thread(run_trial, cfg, trial, options, timing)

    return await asyncio.gather(*(one(trial) for trial in range(cfg.trials)))


def run_monte_carlo(cfg: ScenarioConfig, sweep: dict, options: EstimatorOptions | None = None,
                    workers: int = 1, timing: bool = True) -> list[AggregateRow]:
    """One aggregate row per sweep point, in sweep order."""
    options = options or EstimatorOptions.from_settings()
    rows = []
    for point in sweep_points(sweep):
        point_cfg = apply_point(cfg, point)
        started_at = time.perf_counter()
        results = asyncio.run(_run_point(point_cfg, options, workers, timing))
        row = aggregate(point, results)
        logger.info(
            "%s %s: nmse_x=%.2f dB nmse_theta=%.2f dB P(K=K)=%.3f failures=%d (%d trials, %.1fs)",
            cfg.name, point, row.nmse_x_db, row.nmse_theta_db, row.p_correct, row.failures,
            row.trials, time.perf_counter() - started_at,
        )
        rows.append(row)
    return rows
