"""Entropy-regularized teacher weighting over the simplex.

surrogate(alpha) = sum_i alpha_i L_i + tau * sum_i alpha_i log alpha_i has
the unique minimizer alpha_k proportional to exp(-L_k / tau). The numeric
minimizer here is an exponentiated-gradient iteration, kept independent of
the closed form so each can vouch for the other. The tau here is the
entropy temperature, a separate knob from any softmax temperature used by
the losses.

The divergence-bound chain behind this surrogate (hypothesis-space
divergence, triangle inequality, risk decomposition) is an analysis device
without a computable procedure at this scale; only the weighting result
above is executable.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ConvergenceError

EG_STEP_SCALE = 0.5  # step size is 0.5 / tau
EG_MAX_ITERS = 10_000


def _check_losses(losses) -> np.ndarray:
    arr = np.asarray(losses, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("losses must be a non-empty 1-D array")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("losses must be finite and non-negative")
    return arr


def _check_tau(tau: float) -> float:
    if tau <= 0:
        raise ConfigError("entropy temperature must be positive")
    return float(tau)


def assert_simplex(alpha: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > tol:
        raise ValueError("weights must be a point on the probability simplex")
    return alpha


def surrogate_objective(alpha, losses, tau: float) -> float:
    """sum_i alpha_i L_i + tau * sum_i alpha_i log alpha_i, with 0 log 0 = 0."""
    tau = _check_tau(tau)
    arr = _check_losses(losses)
    alpha = assert_simplex(alpha, tol=1e-8)
    if alpha.shape != arr.shape:
        raise ValueError("alpha and losses must have matching lengths")
    pos = alpha > 0
    entropy_part = float(np.sum(alpha[pos] * np.log(alpha[pos])))
    return float(np.dot(alpha, arr) + tau * entropy_part)


def closed_form_weights(losses, tau: float) -> np.ndarray:
    """alpha_k proportional to exp(-L_k / tau), max-subtracted before exp."""
    tau = _check_tau(tau)
    arr = _check_losses(losses)
    z = -arr / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def numeric_minimize(
    losses, tau: float, iters: int = EG_MAX_ITERS, tol: float = 1e-9
) -> np.ndarray:
    """Exponentiated-gradient descent of the surrogate over the simplex.

    Multiplicative updates keep the iterate strictly inside the simplex.
    Stationarity is measured as the largest deviation of the objective
    gradient from its alpha-weighted mean; at a simplex-interior optimum the
    gradient is constant across coordinates.
    """
    tau = _check_tau(tau)
    arr = _check_losses(losses)
    n = arr.size
    alpha = np.full(n, 1.0 / n)
    step = EG_STEP_SCALE / tau
    for _ in range(int(iters)):
        grad = arr + tau * (1.0 + np.log(alpha))
        if np.abs(grad - np.dot(grad, alpha)).max() <= tol:
            return alpha
        shifted = -step * (grad - grad.min())
        alpha = alpha * np.exp(shifted)
        alpha = alpha / alpha.sum()
    raise ConvergenceError(
        f"no stationary point within {iters} iterations at tol {tol}"
    )
