"""Von Mises and modified-Bessel primitives.

Every frequency update in the estimator goes through this module, so
everything here stays finite for concentrations up to ``1e8``:

* ``I_m(k) / I_0(k)`` is never formed from raw Bessel values.  The top
  ratio ``I_n / I_{n-1}`` comes from Perron's continued fraction and the
  lower orders follow by the (stable) downward recurrence.
* ``ln I_0(k)`` uses the exponentially scaled ``scipy.special.i0e``.

Angles are wrapped to ``[-pi, pi)`` by :func:`wrap_angle` everywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import i0e

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# Continued-fraction controls.
_CF_TOLERANCE = 1e-15
_CF_MAX_TERMS = 100_000
_CF_TINY = 1e-300


def wrap_angle(theta):
    """Wrap ``theta`` (scalar or array) into ``[-pi, pi)``."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # np.mod can round up to exactly 2*pi for tiny negative inputs.
    wrapped = np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def _check_kappa(kappa: float) -> float:
    kappa = float(kappa)
    if not kappa >= 0.0:
        raise ValueError(f"concentration must be nonnegative, got {kappa!r}")
    return kappa


def _check_order(order) -> int:
    if int(order) != order or order < 0:
        raise ValueError(f"order must be a nonnegative integer, got {order!r}")
    return int(order)


# ---------------------------------------------------------------------------
# Von Mises distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VonMises:
    """Von Mises distribution on the circle.

    ``concentration == 0`` is the uniform (uninformative) distribution; the
    mean direction is then irrelevant but still kept wrapped.
    """

    mean_direction: float = 0.0
    concentration: float = 0.0

    def __post_init__(self):
        kappa = _check_kappa(self.concentration)
        if not math.isfinite(kappa):
            raise ValueError(f"concentration must be finite, got {kappa!r}")
        if not math.isfinite(float(self.mean_direction)):
            raise ValueError(f"mean direction must be finite, got {self.mean_direction!r}")
        object.__setattr__(self, "concentration", kappa)
        object.__setattr__(self, "mean_direction", wrap_angle(self.mean_direction))

    @classmethod
    def uniform(cls) -> "VonMises":
        return cls(0.0, 0.0)

    @property
    def is_uniform(self) -> bool:
        return self.concentration == 0.0

    def moments(self, length: int) -> np.ndarray:
        """Return ``E[exp(j m theta)]`` for ``m = 0 .. length-1``.

        Element 0 is exactly 1.
        """
        orders = np.arange(length)
        ratios = bessel_ratios(self.concentration, length - 1)
        out = np.exp(1j * orders * self.mean_direction) * ratios
        out[0] = 1.0
        return out


# ---------------------------------------------------------------------------
# Bessel ratios
# ---------------------------------------------------------------------------

def _perron_ratio(order: int, kappa: float) -> float:
    """``I_order(kappa) / I_{order-1}(kappa)`` via Perron's continued fraction.

    Evaluated with the modified Lentz algorithm; ``order >= 1``, ``kappa > 0``.
    """
    nu = float(order)
    x = kappa
    f = 2.0 * nu + x
    if f == 0.0:
        f = _CF_TINY
    c = f
    d = 0.0
    for k in range(1, _CF_MAX_TERMS + 1):
        a_k = -(2.0 * nu + 2.0 * k - 1.0) * x
        b_k = 2.0 * nu + k + 2.0 * x
        d = b_k + a_k * d
        if d == 0.0:
            d = _CF_TINY
        c = b_k + a_k / c
        if c == 0.0:
            c = _CF_TINY
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < _CF_TOLERANCE:
            break
    else:
        logger.warning("Bessel continued fraction did not converge (order=%d, kappa=%g)", order, kappa)
    return x / f


def bessel_ratios(kappa: float, max_order: int) -> np.ndarray:
    """Return ``I_m(kappa) / I_0(kappa)`` for ``m = 0 .. max_order``.

    Raises ``ValueError`` for a negative ``kappa`` or ``max_order``.
    """
    kappa = _check_kappa(kappa)
    max_order = _check_order(max_order)

    out = np.zeros(max_order + 1)
    out[0] = 1.0
    if max_order == 0 or kappa == 0.0:
        return out

    # r[m] = I_m / I_{m-1}; the recurrence r_m = 1 / (2m/k + r_{m+1}) is
    # stable downwards, so only the top order needs the continued fraction.
    step = np.empty(max_order + 1)
    step[max_order] = _perron_ratio(max_order, kappa)
    for m in range(max_order - 1, 0, -1):
        step[m] = 1.0 / (2.0 * m / kappa + step[m + 1])
    np.clip(step[1:], 0.0, 1.0, out=step[1:])
    out[1:] = np.cumprod(step[1:])
    return out


def bessel_ratio(order: int, kappa: float) -> float:
    """``I_order(kappa) / I_0(kappa)``, in ``[0, 1]``."""
    order = _check_order(order)
    return float(bessel_ratios(kappa, order)[order])


def log_i0(kappa):
    """Overflow-safe ``ln I_0(kappa)``."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0):
        raise ValueError("concentration must be nonnegative")
    value = kappa + np.log(i0e(kappa))
    if value.ndim == 0:
        return float(value)
    return value


# ---------------------------------------------------------------------------
# Moments and densities
# ---------------------------------------------------------------------------

def circular_moment(vm: VonMises, order: int) -> complex:
    """``E[exp(j * order * theta)]`` under ``vm``."""
    order = _check_order(order)
    if order < 1:
        raise ValueError(f"moment order must be positive, got {order!r}")
    return complex(np.exp(1j * order * vm.mean_direction) * bessel_ratio(order, vm.concentration))


def vm_log_pdf(theta, vm: VonMises):
    """Log density of ``vm`` at ``theta`` (scalar or array)."""
    value = (
        vm.concentration * np.cos(np.asarray(theta, dtype=float) - vm.mean_direction)
        - LOG_2PI
        - log_i0(vm.concentration)
    )
    if np.ndim(value) == 0:
        return float(value)
    return value
