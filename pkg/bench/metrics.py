"""Error metrics for benchmark trials."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from estimation.circular import wrap_angle
from estimation.model import wrap_distance

NMSE_FLOOR_DB = -300.0


def to_db(ratio: float) -> float:
    """``10 log10(ratio)`` floored at ``NMSE_FLOOR_DB``; NaN passes through."""
    if math.isnan(ratio):
        return math.nan
    if ratio <= 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(ratio), NMSE_FLOOR_DB)


def signal_error_ratio(X_hat, X_true) -> float:
    X_hat = np.asarray(X_hat)
    X_true = np.asarray(X_true)
    if X_hat.shape != X_true.shape:
        raise ValueError(f"shape mismatch: {X_hat.shape} vs {X_true.shape}")
    energy = float(np.linalg.norm(X_true)) ** 2
    if energy == 0.0:
        raise ValueError("signal NMSE is undefined for a zero ground truth")
    return float(np.linalg.norm(X_hat - X_true)) ** 2 / energy


def nmse_signal(X_hat, X_true) -> float:
    return to_db(signal_error_ratio(X_hat, X_true))


def frequency_error_ratio(est_thetas, concentrations, true_thetas) -> float:
    """Matched squared frequency error over ``||theta||^2``.

    Only the ``K`` most concentrated estimates are kept.  Estimates are
    paired with true frequencies by minimum total squared wrap distance; a true
    frequency left without a partner counts as estimated at zero.
    """
    truth = np.asarray(true_thetas, dtype=float).reshape(-1)
    energy = float(np.sum(truth ** 2))
    if energy == 0.0:
        raise ValueError("frequency NMSE is undefined when all true frequencies are zero")
    est = np.asarray(est_thetas, dtype=float).reshape(-1)
    kappa = np.asarray(concentrations, dtype=float).reshape(-1)
    if est.shape != kappa.shape:
        raise ValueError("one concentration per estimated frequency is required")
    if est.size > truth.size:
        est = est[np.argsort(-kappa, kind="stable")[: truth.size]]

    errors = truth.copy()
    if est.size:
        # Squared cost keeps the pairing independent of input order.
        cost = wrap_distance(truth[:, np.newaxis], est[np.newaxis, :]) ** 2
        rows, cols = linear_sum_assignment(cost)
        errors[rows] = wrap_angle(est[cols] - truth[rows])
    return float(np.sum(errors ** 2)) / energy


def nmse_frequency(estimate, true_thetas) -> float:
    return to_db(frequency_error_ratio(estimate.thetas, estimate.concentrations, true_thetas))


def theta_from_doa(degrees):
    """Spatial frequency ``pi sin(phi)`` of a half-wavelength array."""
    return np.pi * np.sin(np.radians(degrees))


def doa_from_theta(theta):
    """Inverse of :func:`theta_from_doa`, in degrees."""
    return np.degrees(np.arcsin(np.clip(np.asarray(theta, dtype=float) / np.pi, -1.0, 1.0)))
