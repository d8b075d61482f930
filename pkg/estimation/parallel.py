"""Per-snapshot decomposition of the estimator.

The ``L`` snapshots are treated as independent single-vector problems that
share the frequency beliefs, the weight covariance and the
hyperparameters.  Each snapshot contributes

* a message part ``eta_{i,l}`` (the batch message is their sum),
* a support delta ``Delta_{k,l}`` (the batch delta is their sum minus
  ``(L - 1)`` copies of the activation log-odds),
* single-snapshot estimates ``nu_l`` and ``tau_l`` (the batch values are
  their means).

Workers evaluate snapshots; the coordinator always folds the results in
snapshot order, so the output does not depend on the number of workers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .engine import (
    ACTIVATE,
    DEACTIVATE,
    EstimatorOptions,
    EstimatorState,
    FlipDelta,
    run,
    settle_hyperparams,
)
from .model import Estimate, HyperParams, MeasurementSet, PriorConfig, WeightPosterior

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SnapshotIntermediates:
    """Per-snapshot pieces of one iteration, indexed by snapshot."""

    eta_per_snapshot: tuple[np.ndarray, ...]
    delta_per_snapshot: tuple[float, ...]
    nu_per_snapshot: tuple[float, ...]
    tau_per_snapshot: tuple[float, ...]

    def __post_init__(self):
        lengths = {
            len(self.eta_per_snapshot),
            len(self.delta_per_snapshot),
            len(self.nu_per_snapshot),
            len(self.tau_per_snapshot),
        }
        if len(lengths) != 1:
            raise ValueError(f"per-snapshot sequences differ in length: {sorted(lengths)}")


def _check_snapshot(l: int, state: EstimatorState) -> None:
    if not 0 <= l < state.L:
        raise ValueError(f"snapshot {l} out of range 0..{state.L - 1}")


# ---------------------------------------------------------------------------
# Per-snapshot pieces
# ---------------------------------------------------------------------------

def snapshot_message(i: int, l: int, state: EstimatorState, weights: WeightPosterior | None = None) -> np.ndarray:
    """Snapshot ``l``'s share of the message of active component ``i``."""
    _check_snapshot(l, state)
    weights = state.weights if weights is None else weights
    if i not in weights:
        raise ValueError(f"component {i} is not active")
    p = weights.position(i)
    residual = state.measurements.Y[:, l].copy()
    correction = np.zeros(state.M, dtype=np.complex128)
    for q, j in enumerate(weights.active):
        if q == p:
            continue
        a_j = state.components[j].a_hat
        residual -= a_j * weights.W_hat[q, l]
        correction += weights.C_hat[q, p] * a_j
    return (2.0 / state.hyper.nu) * (residual * np.conj(weights.W_hat[p, l]) - correction)


def snapshot_delta(k: int, l: int, state: EstimatorState, weights: WeightPosterior) -> tuple[float, float, complex]:
    """``(Delta_{k,l}, v_k, [u_k]_l)`` for flipping component ``k``."""
    _check_snapshot(l, state)
    hyper = state.hyper
    nu, tau = hyper.nu, hyper.tau
    if k in weights:
        p = weights.position(k)
        v = float(weights.C_hat[p, p].real)
        u_l = complex(weights.W_hat[p, l])
        return -math.log(v / tau) - abs(u_l) ** 2 / v - hyper.log_odds, v, u_l

    j = state.coupling.J[list(weights.active), k]
    Cj = weights.C_hat @ j
    v = nu / float((state.coupling.J[k, k] + nu / tau - np.vdot(j, Cj) / nu).real)
    u_l = complex((v / nu) * (np.conj(state.coupling.H[k, l]) - np.vdot(weights.W_hat[:, l], j)))
    return math.log(v / tau) + abs(u_l) ** 2 / v + hyper.log_odds, v, u_l


def combine_deltas(deltas: Sequence[float], lambda_: float, direction: str = ACTIVATE) -> float:
    """Batch delta from per-snapshot deltas, summed in snapshot order."""
    log_odds = math.log(lambda_) - math.log1p(-lambda_)
    total = 0.0
    for delta in deltas:
        total += delta
    extra = (len(deltas) - 1) * log_odds
    return total - extra if direction == ACTIVATE else total + extra


def snapshot_hyperparams(l: int, state: EstimatorState, weights: WeightPosterior) -> tuple[float, float | None]:
    """Single-snapshot ``(nu_l, tau_l)``; ``tau_l`` is ``None`` for an empty support."""
    _check_snapshot(l, state)
    M = state.M
    A = state.a_hat(weights.active)
    w_l = weights.W_hat[:, l]
    residual = state.measurements.Y[:, l] - A @ w_l
    nu_l = float(np.vdot(residual, residual).real)
    if not weights.size:
        return nu_l / M, None
    J_S, _ = state.coupling.restrict(weights.active)
    nu_l += float(np.trace(J_S @ weights.C_hat).real)
    a_norms = np.sum(np.abs(A) ** 2, axis=0)
    nu_l += float(np.sum(np.abs(w_l) ** 2 * (M - a_norms)))
    tau_l = (float(np.vdot(w_l, w_l).real) + float(np.trace(weights.C_hat).real)) / weights.size
    return nu_l / M, tau_l


def combine_hyperparams(nus: Sequence[float], taus: Sequence[float | None], active_count: int,
                        state: EstimatorState, options: EstimatorOptions) -> HyperParams:
    """Means of the single-snapshot estimates, folded in snapshot order."""
    if not nus:
        raise ValueError("need at least one snapshot")
    nu = 0.0
    for value in nus:
        nu += value
    nu /= len(nus)
    tau = None
    if active_count:
        tau = 0.0
        for value in taus:
            tau += value
        tau /= len(taus)
    return settle_hyperparams(nu, tau, active_count, state, options)


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

class SnapshotKernel:
    """Kernel evaluating snapshots on ``executor`` (or inline when ``None``)."""

    def __init__(self, executor: Executor | None = None):
        self.executor = executor

    def _map(self, fn: Callable[[int], object], count: int) -> list:
        if self.executor is None:
            return [fn(l) for l in range(count)]
        # Executor.map yields in submission order whatever the scheduling.
        return list(self.executor.map(fn, range(count)))

    def message(self, i, state):
        parts = self._map(lambda l: snapshot_message(i, l, state), state.L)
        total = np.zeros(state.M, dtype=np.complex128)
        for part in parts:
            total = total + part
        return total

    def flip_deltas(self, state, weights, candidates):
        candidates = list(candidates)
        per_snapshot = self._map(lambda l: [snapshot_delta(k, l, state, weights) for k in candidates], state.L)
        flips = []
        for c, k in enumerate(candidates):
            direction = DEACTIVATE if k in weights else ACTIVATE
            deltas = [per_snapshot[l][c][0] for l in range(state.L)]
            v = per_snapshot[0][c][1]
            u = np.array([per_snapshot[l][c][2] for l in range(state.L)], dtype=np.complex128)
            delta = combine_deltas(deltas, state.hyper.lambda_, direction)
            flips.append(FlipDelta(k, delta, v, u, direction))
        return flips

    def hyperparams(self, state, weights, options):
        values = self._map(lambda l: snapshot_hyperparams(l, state, weights), state.L)
        return combine_hyperparams([nu for nu, _ in values], [tau for _, tau in values], weights.size, state, options)

    def intermediates(self, i: int, k: int, state: EstimatorState) -> SnapshotIntermediates:
        """All per-snapshot pieces for message ``i`` and flip ``k`` on the current state."""
        weights = state.weights
        etas = tuple(self._map(lambda l: snapshot_message(i, l, state, weights), state.L))
        deltas = tuple(snapshot_delta(k, l, state, weights)[0] for l in range(state.L))
        hyper = [snapshot_hyperparams(l, state, weights) for l in range(state.L)]
        return SnapshotIntermediates(
            eta_per_snapshot=etas,
            delta_per_snapshot=deltas,
            nu_per_snapshot=tuple(nu for nu, _ in hyper),
            tau_per_snapshot=tuple(tau if tau is not None else state.hyper.tau for _, tau in hyper),
        )


def run_parallel(measurements: MeasurementSet, priors: PriorConfig, options: EstimatorOptions | None = None,
                 workers: int = 1, initial_hyper: HyperParams | None = None) -> Estimate:
    """Estimator run with snapshot sums spread over ``workers`` threads."""
    if workers < 1:
        raise ValueError(f"workers must be positive, got {workers!r}")
    logger.debug("running on %d worker(s) over %d snapshot(s)", workers, measurements.L)
    if workers == 1:
        return run(measurements, priors, options, kernel=SnapshotKernel(), initial_hyper=initial_hyper)
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="snapshot") as pool:
        return run(measurements, priors, options, kernel=SnapshotKernel(pool), initial_hyper=initial_hyper)
