"""Sequential estimation over snapshot groups.

The snapshots are split into ``G`` consecutive groups.  Each group is
estimated on its own, then every active component's fitted posterior
becomes that component's prior for the next group; inactive components
hand on the prior they had.  Hyperparameters are re-initialized from each
group's data unless ``carry_hyperparams`` is set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

from .engine import EstimatorOptions, run
from .model import Estimate, MeasurementSet, PriorConfig
from .parallel import run_parallel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupPlan:
    group_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(size) for size in self.group_sizes)
        if not sizes or any(size < 1 for size in sizes):
            raise ValueError(f"group sizes must be positive, got {sizes}")
        object.__setattr__(self, "group_sizes", sizes)

    @property
    def G(self) -> int:
        return len(self.group_sizes)

    @property
    def L(self) -> int:
        return sum(self.group_sizes)

    def bounds(self) -> list[tuple[int, int]]:
        """``(start, stop)`` snapshot ranges of the groups."""
        out, start = [], 0
        for size in self.group_sizes:
            out.append((start, start + size))
            start += size
        return out


def partition(L: int, G: int) -> GroupPlan:
    """Near-equal split of ``L`` snapshots; the first groups take the remainder."""
    if not 1 <= G <= L:
        raise ValueError(f"cannot split {L} snapshot(s) into {G} group(s)")
    base, extra = divmod(L, G)
    return GroupPlan(tuple(base + 1 if g < extra else base for g in range(G)))


def iter_sequential(measurements: MeasurementSet, priors: PriorConfig, plan: GroupPlan,
                    options: EstimatorOptions | None = None, carry_hyperparams: bool = False,
                    workers: int = 1) -> Iterator[Estimate]:
    """Yield the estimate of every group in turn."""
    if plan.L != measurements.L:
        raise ValueError(f"plan covers {plan.L} snapshot(s), data has {measurements.L}")
    current = priors
    hyper = None
    for g, (start, stop) in enumerate(plan.bounds(), start=1):
        group = measurements if plan.G == 1 else measurements.columns(start, stop)
        if workers > 1:
            estimate = run_parallel(group, current, options, workers=workers, initial_hyper=hyper)
        else:
            estimate = run(group, current, options, initial_hyper=hyper)
        logger.info("group %d/%d (%d snapshot(s)): K=%d", g, plan.G, stop - start, estimate.K_hat)
        yield estimate

        chained = list(estimate.priors)
        for i in estimate.active:
            chained[i] = estimate.components[i].fitted
        current = current.with_priors(chained)
        if carry_hyperparams:
            hyper = estimate.hyper


def run_sequential(measurements: MeasurementSet, priors: PriorConfig, plan: GroupPlan,
                   options: EstimatorOptions | None = None, carry_hyperparams: bool = False,
                   workers: int = 1) -> Estimate:
    """Estimate of the last group after chaining priors through all groups."""
    estimate = None
    for estimate in iter_sequential(measurements, priors, plan, options, carry_hyperparams, workers):
        pass
    return estimate
