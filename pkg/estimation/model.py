"""Data model of the estimator.

Observations, frequency priors, component and weight posteriors,
hyperparameters and the final :class:`Estimate`.  Everything here is a
value type; the only mutable object of the estimator is
``estimation.engine.EstimatorState``.

Component indices run from 0 to ``N - 1``.  Active sets are tuples kept in
ascending order and every active-set matrix (``J``, ``H``, ``C_hat``,
``W_hat``) follows that order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .circular import VonMises, wrap_angle


def steering_vector(theta: float, M: int) -> np.ndarray:
    """``[1, e^{j theta}, ..., e^{j (M-1) theta}]``."""
    if M < 1:
        raise ValueError(f"M must be positive, got {M!r}")
    return np.exp(1j * np.arange(M) * float(theta))


def steering_matrix(thetas, M: int) -> np.ndarray:
    """``M x K`` matrix whose columns are steering vectors."""
    thetas = np.asarray(thetas, dtype=float).reshape(-1)
    return np.exp(1j * np.outer(np.arange(M), thetas))


def wrap_distance(a, b):
    """Shortest distance between angles on the circle, in ``[0, pi]``."""
    distance = np.abs(wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    if np.ndim(distance) == 0:
        return float(distance)
    return distance


# ---------------------------------------------------------------------------
# Observations and priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementSet:
    """Complex ``M x L`` observation matrix (rows: samples, columns: snapshots)."""

    Y: np.ndarray

    def __post_init__(self):
        Y = np.array(self.Y, dtype=np.complex128)
        if Y.ndim == 1:
            Y = Y[:, np.newaxis]
        if Y.ndim != 2:
            raise ValueError(f"observations must be a matrix, got shape {Y.shape}")
        if Y.shape[0] < 2:
            raise ValueError(f"need at least 2 samples per snapshot, got M={Y.shape[0]}")
        if Y.shape[1] < 1:
            raise ValueError("need at least one snapshot")
        if not np.all(np.isfinite(Y)):
            raise ValueError("observations must be finite")
        Y.setflags(write=False)
        object.__setattr__(self, "Y", Y)

    @property
    def M(self) -> int:
        return self.Y.shape[0]

    @property
    def L(self) -> int:
        return self.Y.shape[1]

    def columns(self, start: int, stop: int) -> "MeasurementSet":
        """Snapshots ``start .. stop-1`` as a new measurement set."""
        return MeasurementSet(self.Y[:, start:stop])


class PriorMatching(str, enum.Enum):
    """How initialization hands frequency priors to components."""

    NEAREST = "nearest"
    IN_ORDER = "in_order"


@dataclass(frozen=True)
class PriorConfig:
    priors: tuple[VonMises, ...]
    initial_lambda: float = 0.5
    matching: PriorMatching = PriorMatching.NEAREST

    def __post_init__(self):
        priors = tuple(self.priors)
        if not priors:
            raise ValueError("need at least one component prior")
        if not 0.0 < self.initial_lambda < 1.0:
            raise ValueError(f"initial lambda must lie in (0, 1), got {self.initial_lambda!r}")
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "matching", PriorMatching(self.matching))

    @property
    def N(self) -> int:
        return len(self.priors)

    @property
    def informative(self) -> bool:
        return any(not prior.is_uniform for prior in self.priors)

    @classmethod
    def uninformative(cls, N: int, **kwargs) -> "PriorConfig":
        return cls(tuple(VonMises.uniform() for _ in range(N)), **kwargs)

    @classmethod
    def grid(cls, N: int, kappa0: float, **kwargs) -> "PriorConfig":
        """Priors centred on ``(2i - 1 - N) / (N + 1) * pi`` for ``i = 1 .. N``."""
        means = [(2 * i - 1 - N) / (N + 1) * math.pi for i in range(1, N + 1)]
        return cls(tuple(VonMises(mu, kappa0) for mu in means), **kwargs)

    def with_priors(self, priors) -> "PriorConfig":
        return replace(self, priors=tuple(priors))


# ---------------------------------------------------------------------------
# Posteriors and hyperparameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperParams:
    nu: float
    lambda_: float
    tau: float

    def __post_init__(self):
        if not self.nu > 0.0:
            raise ValueError(f"noise variance must be positive, got {self.nu!r}")
        if not self.tau > 0.0:
            raise ValueError(f"weight variance must be positive, got {self.tau!r}")
        if not 0.0 < self.lambda_ < 1.0:
            raise ValueError(f"activation probability must lie in (0, 1), got {self.lambda_!r}")

    @property
    def log_odds(self) -> float:
        """``ln(lambda / (1 - lambda))``."""
        return math.log(self.lambda_) - math.log1p(-self.lambda_)

    def as_dict(self) -> dict:
        return {"nu": self.nu, "lambda": self.lambda_, "tau": self.tau}


@dataclass(frozen=True)
class ComponentPosterior:
    """Frequency belief of one component.

    ``a_hat[m] = e^{j m mu_hat} I_m(kappa_hat) / I_0(kappa_hat)``.
    """

    eta: np.ndarray
    fitted: VonMises
    a_hat: np.ndarray

    @classmethod
    def from_fit(cls, eta: np.ndarray, fitted: VonMises) -> "ComponentPosterior":
        eta = np.asarray(eta, dtype=np.complex128)
        return cls(eta=eta, fitted=fitted, a_hat=fitted.moments(eta.shape[0]))

    @classmethod
    def from_prior(cls, prior: VonMises, M: int) -> "ComponentPosterior":
        return cls.from_fit(np.zeros(M, dtype=np.complex128), prior)

    @property
    def theta(self) -> float:
        return self.fitted.mean_direction

    @property
    def kappa(self) -> float:
        return self.fitted.concentration


@dataclass(frozen=True)
class WeightPosterior:
    """Gaussian posterior of the active weight rows.

    ``W_hat`` is ``|S| x L``; ``C_hat`` is the ``|S| x |S|`` covariance
    shared by every snapshot column.
    """

    active: tuple[int, ...]
    W_hat: np.ndarray
    C_hat: np.ndarray

    @classmethod
    def empty(cls, L: int) -> "WeightPosterior":
        return cls((), np.zeros((0, L), dtype=np.complex128), np.zeros((0, 0), dtype=np.complex128))

    @property
    def size(self) -> int:
        return len(self.active)

    @property
    def L(self) -> int:
        return self.W_hat.shape[1]

    def position(self, k: int) -> int:
        return self.active.index(k)

    def row(self, k: int) -> np.ndarray:
        return self.W_hat[self.position(k)]

    def __contains__(self, k) -> bool:
        return k in self.active


@dataclass(frozen=True)
class Estimate:
    """Result of one estimator run.

    ``active`` holds the component index of every reported frequency and
    ``priors`` the per-component priors the run ended with (inactive
    components keep theirs).  ``support_history`` records the active set
    after each iteration.
    """

    K_hat: int
    thetas: np.ndarray
    weights: np.ndarray
    X_hat: np.ndarray
    concentrations: np.ndarray
    hyper: HyperParams
    iterations: int
    converged: bool
    active: tuple[int, ...] = ()
    components: tuple[ComponentPosterior, ...] = ()
    priors: tuple[VonMises, ...] = ()
    support_history: tuple[tuple[int, ...], ...] = field(default=())

    @property
    def prior_slots(self) -> tuple[int, ...]:
        return self.active

    def posteriors(self) -> tuple[VonMises, ...]:
        """Fitted frequency posteriors of the active components."""
        return tuple(self.components[i].fitted for i in self.active)
