"""Batch MVALSE estimator.

One run of :func:`run` alternates, until ``X_hat`` stops moving:

1. greedy support search on the evidence surrogate ``ln Z`` with rank-one
   weight updates (:func:`update_support`),
2. closed-form hyperparameter updates (:func:`update_hyperparams`),
3. frequency messages and von Mises fits for the active components,
4. recomputation of the coupling matrices ``J`` and ``H``.

Snapshot-dependent sums (messages, support deltas, hyperparameters) are
delegated to a kernel so that ``estimation.parallel`` can swap in the
per-snapshot decomposition without touching the loop.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from django.conf import settings
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigvalsh, toeplitz

from .circular import VonMises, wrap_angle
from .model import (
    ComponentPosterior,
    Estimate,
    HyperParams,
    MeasurementSet,
    PriorConfig,
    PriorMatching,
    WeightPosterior,
    wrap_distance,
)

logger = logging.getLogger(__name__)

ACTIVATE = "activate"
DEACTIVATE = "deactivate"
# Flips allowed per component in one support search.
MAX_FLIPS_PER_COMPONENT = 10


class EstimatorFailure(RuntimeError):
    """A linear system of the estimator could not be solved."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration

    def __str__(self):
        base = super().__str__()
        if self.iteration is None:
            return base
        return f"{base} (iteration {self.iteration})"


# ---------------------------------------------------------------------------
# Options
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorOptions:
    max_iterations: int = 200
    tolerance: float = 1e-5
    deactivate: bool = True
    # None keeps the matching mode of the PriorConfig.
    prior_matching: PriorMatching | None = None
    lambda_min: float = 1e-3
    grid_size: int = 4096
    newton_steps: int = 20
    nu_floor_ratio: float = 1e-8
    # Known-order hook: activate the first K initialized components and
    # never search the support.  Not a supported estimation mode.
    fixed_support_size: int | None = None

    @classmethod
    def from_settings(cls, **overrides) -> "EstimatorOptions":
        """Defaults from ``settings.MVALSE``; ``None`` overrides are ignored."""
        conf = getattr(settings, "MVALSE", {})
        values = {
            "max_iterations": int(conf.get("MAX_ITERATIONS", cls.max_iterations)),
            "tolerance": float(conf.get("TOLERANCE", cls.tolerance)),
            "deactivate": bool(conf.get("DEACTIVATE", cls.deactivate)),
            "lambda_min": float(conf.get("LAMBDA_MIN", cls.lambda_min)),
            "grid_size": int(conf.get("GRID_SIZE", cls.grid_size)),
            "newton_steps": int(conf.get("NEWTON_STEPS", cls.newton_steps)),
            "nu_floor_ratio": float(conf.get("NU_FLOOR_RATIO", cls.nu_floor_ratio)),
        }
        if conf.get("PRIOR_MATCHING"):
            values["prior_matching"] = PriorMatching(conf["PRIOR_MATCHING"])
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def clamp_lambda(self, value: float) -> float:
        return min(max(value, self.lambda_min), 1.0 - self.lambda_min)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingState:
    """``J = A_hat^H A_hat`` with diagonal ``M`` and ``H = A_hat^H Y``.

    Both cover all ``N`` components; the active-set blocks are sliced out
    on demand.
    """

    J: np.ndarray
    H: np.ndarray

    def restrict(self, active: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(active, dtype=int)
        return self.J[np.ix_(idx, idx)], self.H[idx]


@dataclass(frozen=True)
class FlipDelta:
    """Change of ``ln Z`` from flipping component ``k``.

    For an activation ``u`` is the conjugate of the new weight row; for a
    deactivation it is the removed row itself.
    """

    k: int
    delta: float
    v: float
    u: np.ndarray
    direction: str


@dataclass
class EstimatorState:
    """Mutable state of one run; owned by a single caller."""

    measurements: MeasurementSet
    priors: list[VonMises]
    components: list[ComponentPosterior]
    coupling: CouplingState
    weights: WeightPosterior
    hyper: HyperParams
    nu_floor: float
    support_history: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.components)

    @property
    def M(self) -> int:
        return self.measurements.M

    @property
    def L(self) -> int:
        return self.measurements.L

    def a_hat(self, active: Sequence[int]) -> np.ndarray:
        """``M x |active|`` matrix of moment vectors."""
        if not len(active):
            return np.zeros((self.M, 0), dtype=np.complex128)
        return np.stack([self.components[i].a_hat for i in active], axis=1)

    def reconstruct(self) -> np.ndarray:
        """``X_hat = sum_i a_hat_i w_hat_i^T`` over the active set."""
        return self.a_hat(self.weights.active) @ self.weights.W_hat


# ---------------------------------------------------------------------------
# Coupling, messages and frequency posteriors
# ---------------------------------------------------------------------------

def compute_coupling(components: Sequence[ComponentPosterior], measurements: MeasurementSet) -> CouplingState:
    M = measurements.M
    for i, component in enumerate(components):
        if component.a_hat.shape != (M,):
            raise ValueError(f"component {i} has moment vector of shape {component.a_hat.shape}, expected ({M},)")
    if not components:
        return CouplingState(np.zeros((0, 0), dtype=np.complex128), np.zeros((0, measurements.L), dtype=np.complex128))
    A = np.stack([c.a_hat for c in components], axis=1)
    J = A.conj().T @ A
    np.fill_diagonal(J, M)
    H = A.conj().T @ measurements.Y
    return CouplingState(J=J, H=H)


def frequency_message(i: int, measurements: MeasurementSet, components: Sequence[ComponentPosterior],
                      weights: WeightPosterior, nu: float) -> np.ndarray:
    """Message ``eta_i`` of active component ``i``."""
    if i not in weights:
        raise ValueError(f"component {i} is not active")
    p = weights.position(i)
    others = [q for q in range(weights.size) if q != p]
    w_i = weights.W_hat[p]
    residual = measurements.Y.copy()
    correction = np.zeros(measurements.M, dtype=np.complex128)
    for q in others:
        a_j = components[weights.active[q]].a_hat
        residual -= np.outer(a_j, weights.W_hat[q])
        correction += weights.C_hat[q, p] * a_j
    return (2.0 / nu) * (residual @ w_i.conj() - measurements.L * correction)


def _grid_size(requested: int, M: int) -> int:
    size = max(int(requested), 2 * M)
    return 1 << (size - 1).bit_length()


def _log_density_derivatives(theta: float, eta_conj: np.ndarray, orders: np.ndarray, prior: VonMises):
    """First and second derivative of ``f(theta)`` at ``theta``."""
    s = eta_conj * np.exp(1j * orders * theta)
    offset = theta - prior.mean_direction
    kappa0 = prior.concentration
    first = -kappa0 * math.sin(offset) - float(np.sum(orders * s).imag)
    second = -kappa0 * math.cos(offset) - float(np.sum(orders ** 2 * s).real)
    return first, second


def fit_frequency_posterior(eta: np.ndarray, prior: VonMises, grid_size: int = 4096,
                            newton_steps: int = 20) -> ComponentPosterior:
    """Von Mises fit of ``f(theta) = k0 cos(theta - mu0) + Re{eta^H a(theta)}``.

    The mode is located on a uniform grid and polished by Newton steps on the
    analytic derivatives; the concentration matches the curvature at the
    mode.  Without data (``eta[1:] == 0``) the prior is returned unchanged.
    """
    eta = np.asarray(eta, dtype=np.complex128).reshape(-1)
    M = eta.shape[0]
    if not np.any(eta[1:]):
        return ComponentPosterior.from_fit(eta, VonMises.uniform() if prior.is_uniform else prior)

    G = _grid_size(grid_size, M)
    orders = np.arange(M)
    eta_conj = eta.conj()
    # theta_g = -pi + 2 pi g / G, so e^{j m theta_g} = (-1)^m e^{j 2 pi m g / G}.
    coeffs = np.zeros(G, dtype=np.complex128)
    coeffs[:M] = eta_conj * (-1.0) ** orders
    thetas = -np.pi + 2.0 * np.pi * np.arange(G) / G
    values = (np.fft.ifft(coeffs) * G).real
    if prior.concentration:
        values += prior.concentration * np.cos(thetas - prior.mean_direction)

    spacing = 2.0 * np.pi / G
    theta = float(thetas[int(np.argmax(values))])
    for _ in range(newton_steps):
        first, second = _log_density_derivatives(theta, eta_conj, orders, prior)
        if second >= 0.0:
            break
        step = float(np.clip(-first / second, -spacing, spacing))
        theta += step
        if abs(step) < 1e-14:
            break

    _, second = _log_density_derivatives(theta, eta_conj, orders, prior)
    fitted = VonMises(wrap_angle(theta), max(0.0, -second))
    return ComponentPosterior.from_fit(eta, fitted)


# ---------------------------------------------------------------------------
# Weights and the evidence surrogate
# ---------------------------------------------------------------------------

def _factor(P: np.ndarray):
    try:
        return cho_factor(P, lower=False)
    except (LinAlgError, ValueError) as exc:
        raise EstimatorFailure(f"weight precision matrix is not positive definite: {exc}") from exc


def update_weights(coupling: CouplingState, active: Sequence[int], hyper: HyperParams) -> WeightPosterior:
    """Direct weight posterior on ``active``.

    ``C_hat = (J_S / nu + I / tau)^{-1}`` and ``W_hat = C_hat H_S / nu``.
    """
    active = tuple(sorted(active))
    L = coupling.H.shape[1]
    if not active:
        return WeightPosterior.empty(L)
    J_S, H_S = coupling.restrict(active)
    P = J_S + (hyper.nu / hyper.tau) * np.eye(len(active))
    factor = _factor(P)
    C_hat = hyper.nu * cho_solve(factor, np.eye(len(active), dtype=np.complex128))
    C_hat = 0.5 * (C_hat + C_hat.conj().T)
    W_hat = cho_solve(factor, H_S)
    return WeightPosterior(active, W_hat, C_hat)


def support_mask(active: Sequence[int], N: int) -> np.ndarray:
    """Boolean support vector over ``N`` components with ``active`` set."""
    mask = np.zeros(N, dtype=bool)
    mask[list(active)] = True
    return mask


def ln_evidence(support, coupling: CouplingState, hyper: HyperParams) -> float:
    """``ln Z`` of a support, up to the support-independent constant.

    ``support`` is a binary vector over all components (bool or 0/1
    numbers); build one from indices with :func:`support_mask`.  The empty
    support scores 0.
    """
    support = np.asarray(support)
    N = coupling.J.shape[0]
    if support.shape != (N,):
        raise ValueError(f"support must be a binary vector of length {N}, got shape {support.shape}")
    if support.dtype != bool:
        if not np.all((support == 0) | (support == 1)):
            raise ValueError("support must only contain 0 and 1")
        support = support != 0
    active = np.flatnonzero(support)
    if active.size == 0:
        return 0.0
    L = coupling.H.shape[1]
    J_S, H_S = coupling.restrict(active)
    P = J_S + (hyper.nu / hyper.tau) * np.eye(active.size)
    factor = _factor(P)
    log_det = 2.0 * float(np.sum(np.log(np.abs(np.diag(factor[0])))))
    quadratic = float(np.sum(H_S.conj() * cho_solve(factor, H_S)).real)
    count = active.size
    return (
        -L * log_det
        + count * hyper.log_odds
        + quadratic / hyper.nu
        + count * L * math.log(hyper.nu / hyper.tau)
    )


def flip_delta(k: int, coupling: CouplingState, weights: WeightPosterior, hyper: HyperParams,
               direction: str | None = None) -> FlipDelta:
    """``ln Z(flip k) - ln Z(current)`` together with the rank-one factors."""
    active = k in weights
    if direction is None:
        direction = DEACTIVATE if active else ACTIVATE
    if (direction == DEACTIVATE) != active:
        raise ValueError(f"cannot {direction} component {k}: active set is {weights.active}")
    L = coupling.H.shape[1]
    nu, tau = hyper.nu, hyper.tau

    if direction == DEACTIVATE:
        p = weights.position(k)
        v = float(weights.C_hat[p, p].real)
        u = weights.W_hat[p].copy()
        delta = -L * math.log(v / tau) - float(np.vdot(u, u).real) / v - hyper.log_odds
        return FlipDelta(k, delta, v, u, DEACTIVATE)

    j = coupling.J[list(weights.active), k]
    Cj = weights.C_hat @ j
    schur = float((coupling.J[k, k] + nu / tau - np.vdot(j, Cj) / nu).real)
    v = nu / schur
    u = (v / nu) * (coupling.H[k].conj() - weights.W_hat.conj().T @ j)
    delta = L * math.log(v / tau) + float(np.vdot(u, u).real) / v + hyper.log_odds
    return FlipDelta(k, delta, v, u, ACTIVATE)


def apply_flip(coupling: CouplingState, weights: WeightPosterior, flip: FlipDelta, nu: float) -> WeightPosterior:
    """Rank-one update of ``(C_hat, W_hat)`` for an accepted flip."""
    k = flip.k
    if flip.direction == DEACTIVATE:
        p = weights.position(k)
        keep = [q for q in range(weights.size) if q != p]
        c = weights.C_hat[keep, p]
        pivot = weights.C_hat[p, p].real
        C_new = weights.C_hat[np.ix_(keep, keep)] - np.outer(c, c.conj()) / pivot
        W_new = weights.W_hat[keep] - np.outer(c / pivot, weights.W_hat[p])
        active = tuple(weights.active[q] for q in keep)
        return WeightPosterior(active, W_new, 0.5 * (C_new + C_new.conj().T))

    n = weights.size
    j = coupling.J[list(weights.active), k]
    Cj = weights.C_hat @ j
    v = flip.v
    C_ext = np.empty((n + 1, n + 1), dtype=np.complex128)
    C_ext[:n, :n] = weights.C_hat + (v / nu ** 2) * np.outer(Cj, Cj.conj())
    C_ext[:n, n] = -(v / nu) * Cj
    C_ext[n, :n] = C_ext[:n, n].conj()
    C_ext[n, n] = v
    new_row = flip.u.conj()
    W_ext = np.empty((n + 1, weights.L), dtype=np.complex128)
    W_ext[:n] = weights.W_hat - np.outer(Cj, new_row) / nu
    W_ext[n] = new_row

    labels = list(weights.active) + [k]
    order = np.argsort(labels, kind="stable")
    active = tuple(labels[q] for q in order)
    C_new = C_ext[np.ix_(order, order)]
    return WeightPosterior(active, W_ext[order], 0.5 * (C_new + C_new.conj().T))


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

class Kernel(Protocol):
    """Snapshot-dependent sums used by the main loop."""

    def message(self, i: int, state: EstimatorState) -> np.ndarray: ...

    def flip_deltas(self, state: EstimatorState, weights: WeightPosterior,
                    candidates: Sequence[int]) -> list[FlipDelta]: ...

    def hyperparams(self, state: EstimatorState, weights: WeightPosterior,
                    options: EstimatorOptions) -> HyperParams: ...


class BatchKernel:
    """Whole-matrix evaluation of every snapshot sum."""

    def message(self, i, state):
        return frequency_message(i, state.measurements, state.components, state.weights, state.hyper.nu)

    def flip_deltas(self, state, weights, candidates):
        return [flip_delta(k, state.coupling, weights, state.hyper) for k in candidates]

    def hyperparams(self, state, weights, options):
        return update_hyperparams(state, weights, options)


# ---------------------------------------------------------------------------
# Support search and hyperparameters
# ---------------------------------------------------------------------------

def update_support(state: EstimatorState, options: EstimatorOptions, kernel: Kernel | None = None) -> WeightPosterior:
    """Greedy single-flip ascent of ``ln Z`` from the current active set.

    The weight posterior is recomputed directly on the current set (the
    coupling has moved since the last iteration), then the best flip is
    accepted while its delta is positive; ties go to the lowest index.
    At most ``MAX_FLIPS_PER_COMPONENT * N`` flips are made.
    The resulting posterior is stored on ``state`` and returned.
    """
    kernel = kernel or BatchKernel()
    if options.fixed_support_size is not None:
        active = tuple(range(min(options.fixed_support_size, state.N)))
        state.weights = update_weights(state.coupling, active, state.hyper)
        return state.weights

    weights = update_weights(state.coupling, state.weights.active, state.hyper)
    flips = 0
    max_flips = MAX_FLIPS_PER_COMPONENT * state.N
    while True:
        if options.deactivate:
            candidates = list(range(state.N))
        else:
            candidates = [k for k in range(state.N) if k not in weights]
        best = None
        for flip in kernel.flip_deltas(state, weights, candidates):
            if best is None or flip.delta > best.delta:
                best = flip
        if best is None or not best.delta > 0.0:
            break
        weights = apply_flip(state.coupling, weights, best, state.hyper.nu)
        flips += 1
        logger.debug("support flip %d: %s component %d (delta=%.6g)", flips, best.direction, best.k, best.delta)
        if flips >= max_flips:
            logger.warning("support search stopped after %d flips without settling", flips)
            break
    state.weights = weights
    return weights


def settle_hyperparams(nu: float, tau: float | None, active_count: int, state: EstimatorState,
                       options: EstimatorOptions) -> HyperParams:
    """Apply the noise floor, the lambda clamp and the empty-support tau rule."""
    if nu < state.nu_floor:
        logger.debug("noise variance %.3g floored at %.3g", nu, state.nu_floor)
        nu = state.nu_floor
    if tau is None or not tau > 0.0:
        tau = state.hyper.tau
    lambda_ = options.clamp_lambda(active_count / state.N)
    return HyperParams(nu=nu, lambda_=lambda_, tau=tau)


def _expected_residual(state: EstimatorState, weights: WeightPosterior) -> float:
    """``E||Y - A W||_F^2`` under the current posteriors."""
    A = state.a_hat(weights.active)
    residual = state.measurements.Y - A @ weights.W_hat
    total = float(np.vdot(residual, residual).real)
    if weights.size:
        J_S, _ = state.coupling.restrict(weights.active)
        total += state.L * float(np.trace(J_S @ weights.C_hat).real)
        a_norms = np.sum(np.abs(A) ** 2, axis=0)
        row_norms = np.sum(np.abs(weights.W_hat) ** 2, axis=1)
        total += float(np.sum(row_norms * (state.M - a_norms)))
    return total


def update_hyperparams(state: EstimatorState, weights: WeightPosterior | None = None,
                       options: EstimatorOptions | None = None) -> HyperParams:
    """Closed-form maximizers of the lower bound in ``nu``, ``lambda`` and ``tau``."""
    weights = state.weights if weights is None else weights
    options = options or EstimatorOptions()
    nu = _expected_residual(state, weights) / (state.M * state.L)
    tau = None
    if weights.size:
        weight_energy = float(np.vdot(weights.W_hat, weights.W_hat).real)
        tau = (weight_energy + state.L * float(np.trace(weights.C_hat).real)) / (state.L * weights.size)
    return settle_hyperparams(nu, tau, weights.size, state, options)


def lower_bound(state: EstimatorState, hyper: HyperParams | None = None) -> float:
    """Hyperparameter-dependent part of the variational lower bound.

    Evaluated at ``hyper`` (default: the state's) with the current weight
    and frequency posteriors held fixed.
    """
    hyper = hyper or state.hyper
    weights = state.weights
    M, L, N = state.M, state.L, state.N
    count = weights.size
    value = -_expected_residual(state, weights) / hyper.nu - M * L * math.log(hyper.nu)
    prior_energy = float(np.vdot(weights.W_hat, weights.W_hat).real) + L * float(np.trace(weights.C_hat).real)
    value += -prior_energy / hyper.tau - count * L * math.log(hyper.tau)
    value += count * math.log(hyper.lambda_) + (N - count) * math.log1p(-hyper.lambda_)
    return value


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def lag_moments(Y: np.ndarray) -> np.ndarray:
    """``gamma_t = (1/M) sum_l Y[l + t, :] Y[l, :]^H`` for ``t = 0 .. M-1``."""
    M = Y.shape[0]
    gamma = np.empty(M, dtype=np.complex128)
    for t in range(M):
        gamma[t] = np.sum(Y[t:] * Y[:M - t].conj()) / M
    return gamma


def _pick_prior(eta: np.ndarray, unused: list[int], priors: Sequence[VonMises], matching: PriorMatching,
                options: EstimatorOptions) -> int:
    if matching == PriorMatching.IN_ORDER:
        return unused[0]
    informative = [idx for idx in unused if not priors[idx].is_uniform]
    if not informative:
        return unused[0]
    flat = fit_frequency_posterior(eta, VonMises.uniform(), options.grid_size, options.newton_steps)
    distances = [wrap_distance(flat.theta, priors[idx].mean_direction) for idx in informative]
    return informative[int(np.argmin(distances))]


def initialize(measurements: MeasurementSet, priors: PriorConfig, options: EstimatorOptions | None = None,
               initial_hyper: HyperParams | None = None) -> EstimatorState:
    """Starting state: noise level from the Toeplitz lag estimate, then
    every component fitted in turn on the deflated residual.

    The active set starts empty; the first support search picks it.
    """
    options = options or EstimatorOptions()
    Y = measurements.Y
    M, L, N = measurements.M, measurements.L, priors.N
    matching = options.prior_matching or priors.matching

    gamma = lag_moments(Y)
    energy = float(gamma[0].real)
    eigenvalues = eigvalsh(toeplitz(gamma))
    nu = float(np.mean(eigenvalues[: math.ceil(M / 4)])) / L
    nu_floor = max(options.nu_floor_ratio * energy / L, np.finfo(float).tiny)
    if nu < nu_floor:
        logger.warning("initial noise variance %.3g floored at %.3g", nu, nu_floor)
        nu = nu_floor
    lambda_ = options.clamp_lambda(priors.initial_lambda)
    tau = max((energy - L * nu) / (lambda_ * N), nu_floor)
    hyper = HyperParams(nu=nu, lambda_=lambda_, tau=tau)
    if initial_hyper is not None:
        hyper = initial_hyper

    residual = np.array(Y)
    unused = list(range(N))
    assigned: list[VonMises] = []
    components: list[ComponentPosterior] = []
    for _ in range(N):
        eta = (2.0 / hyper.nu) * lag_moments(residual)
        eta[0] = 0.0
        slot = _pick_prior(eta, unused, priors.priors, matching, options)
        unused.remove(slot)
        prior = priors.priors[slot]
        component = fit_frequency_posterior(eta, prior, options.grid_size, options.newton_steps)
        w = (component.a_hat.conj() @ residual) / (M + hyper.nu / hyper.tau)
        residual -= np.outer(component.a_hat, w)
        assigned.append(prior)
        components.append(component)

    state = EstimatorState(
        measurements=measurements,
        priors=assigned,
        components=components,
        coupling=compute_coupling(components, measurements),
        weights=WeightPosterior.empty(L),
        hyper=hyper,
        nu_floor=nu_floor,
    )
    logger.debug("initialized: nu=%.4g tau=%.4g lambda=%.3g", hyper.nu, hyper.tau, hyper.lambda_)
    return state


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def update_frequencies(state: EstimatorState, options: EstimatorOptions, kernel: Kernel | None = None) -> None:
    """Refit every active component in ascending order, each seeing the
    components already refitted in this sweep.

    Inactive components keep their last fitted posterior (not their prior),
    which still enters the coupling matrices.
    """
    kernel = kernel or BatchKernel()
    for i in state.weights.active:
        eta = kernel.message(i, state)
        state.components[i] = fit_frequency_posterior(eta, state.priors[i], options.grid_size, options.newton_steps)


def _relative_change(previous: np.ndarray, current: np.ndarray) -> float:
    norm = np.linalg.norm(previous)
    if norm == 0.0:
        return 0.0 if np.linalg.norm(current) == 0.0 else math.inf
    return float(np.linalg.norm(previous - current) / norm)


def build_estimate(state: EstimatorState, iterations: int, converged: bool) -> Estimate:
    active = state.weights.active
    return Estimate(
        K_hat=len(active),
        thetas=np.array([state.components[i].theta for i in active]),
        weights=state.weights.W_hat.copy(),
        X_hat=state.reconstruct(),
        concentrations=np.array([state.components[i].kappa for i in active]),
        hyper=state.hyper,
        iterations=iterations,
        converged=converged,
        active=active,
        components=tuple(state.components),
        priors=tuple(state.priors),
        support_history=tuple(state.support_history),
    )


def iterate(state: EstimatorState, options: EstimatorOptions, kernel: Kernel) -> None:
    """One pass of the main loop."""
    update_support(state, options, kernel)
    state.hyper = kernel.hyperparams(state, state.weights, options)
    update_frequencies(state, options, kernel)
    state.coupling = compute_coupling(state.components, state.measurements)
    state.support_history.append(state.weights.active)


def run(measurements: MeasurementSet, priors: PriorConfig, options: EstimatorOptions | None = None,
        kernel: Kernel | None = None, initial_hyper: HyperParams | None = None) -> Estimate:
    """Run the estimator to convergence (or ``max_iterations``)."""
    options = options or EstimatorOptions.from_settings()
    kernel = kernel or BatchKernel()
    started_at = time.perf_counter()

    state = initialize(measurements, priors, options, initial_hyper=initial_hyper)
    x_previous = np.zeros_like(measurements.Y)
    converged = False
    iteration = 0
    for iteration in range(1, options.max_iterations + 1):
        try:
            iterate(state, options, kernel)
        except EstimatorFailure as exc:
            exc.iteration = iteration
            raise
        x_current = state.reconstruct()
        change = _relative_change(x_previous, x_current)
        logger.debug("iteration %d: K=%d nu=%.4g change=%.3g", iteration, state.weights.size, state.hyper.nu, change)
        # Convergence is only tested from the second pass on.
        if iteration > 1 and change < options.tolerance:
            converged = True
            break
        x_previous = x_current

    estimate = build_estimate(state, iteration, converged)
    logger.info(
        "estimator finished: K=%d iterations=%d converged=%s in %.3fs",
        estimate.K_hat, iteration, converged, time.perf_counter() - started_at,
    )
    return estimate
