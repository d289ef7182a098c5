"""Importance-sampling weights and the robust aggregate losses built on them.

Two aggregators of a per-sample loss vector ``L`` at temperature ``T``:

* ``is_loss``      -- ``T * log(sum(exp(L / T)))``, weights ``softmax(L / T)``
* ``log_is_loss``  -- ``T * log(sum(L ** (1 / T)))``, weights ``L**(1/T) / sum(L**(1/T))``

``exp(log_is_loss(L, T))`` is the ``1/T``-norm of ``L``. Everything is evaluated
in log space with a max shift, so inputs spanning many orders of magnitude
neither overflow nor lose the dominant terms.

``is_loss`` keeps the ``T * log(N)`` offset of the entropy-regularized value;
subtract it to compare against the Lagrangian with the ``log N`` term dropped.
"""

import math

import numpy as np

from .exceptions import DomainError

__all__ = [
    "DEFAULT_CLAMP_EPS",
    "check_temperature",
    "as_loss_vector",
    "is_weights",
    "is_loss",
    "is_loss_grad",
    "log_is_weights",
    "log_is_loss",
    "log_is_loss_grad",
    "empirical_kl",
]

DEFAULT_CLAMP_EPS = 1e-12


def check_temperature(temp):
    """Return ``temp`` as a float, rejecting non-positive or non-finite values."""
    try:
        t = float(temp)
    except (TypeError, ValueError):
        raise DomainError(f"temperature must be a real number, got {temp!r}") from None
    if not math.isfinite(t) or t <= 0.0:
        raise DomainError(f"temperature must be positive and finite, got {temp!r}")
    return t


def as_loss_vector(losses):
    """Validate a 1-D, nonempty, finite float64 loss vector."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise DomainError("loss vector is empty")
    if not np.all(np.isfinite(arr)):
        raise DomainError("loss vector contains non-finite values")
    return arr


def _log_softmax(z):
    m = np.max(z)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted)))


def _logsumexp(z):
    m = np.max(z)
    return m + np.log(np.sum(np.exp(z - m)))


def is_weights(losses, temp):
    """Worst-case importance weights ``softmax(L / T)`` over a KL ball."""
    L = as_loss_vector(losses)
    t = check_temperature(temp)
    w = np.exp(_log_softmax(L / t))
    return w / np.sum(w)


def is_loss(losses, temp):
    """Temperature-scaled log-sum-exp of the losses (includes ``T log N``)."""
    L = as_loss_vector(losses)
    t = check_temperature(temp)
    return float(t * _logsumexp(L / t))


def is_loss_grad(losses, temp):
    """Gradient of :func:`is_loss` with respect to each loss; equals :func:`is_weights`."""
    return is_weights(losses, temp)


def _positive_log_losses(losses, clamp, eps):
    L = as_loss_vector(losses)
    if clamp:
        eps = float(eps)
        if not eps > 0.0:
            raise DomainError(f"clamp eps must be positive, got {eps!r}")
        clamped = L < eps
        L = np.where(clamped, eps, L)
    else:
        if np.any(L <= 0.0):
            raise DomainError("log-IS losses must be strictly positive (use clamp=True to floor them)")
        clamped = np.zeros(L.shape, dtype=bool)
    return L, np.log(L), clamped


def log_is_weights(losses, temp, clamp=False, eps=DEFAULT_CLAMP_EPS):
    """Normalized powers ``L_i**(1/T) / sum_j L_j**(1/T)``.

    With ``clamp=True`` losses below ``eps`` are floored to ``eps`` instead of
    raising.
    """
    t = check_temperature(temp)
    _, logL, _ = _positive_log_losses(losses, clamp, eps)
    w = np.exp(_log_softmax(logL / t))
    return w / np.sum(w)


def log_is_loss(losses, temp, clamp=False, eps=DEFAULT_CLAMP_EPS):
    """Log of the ``1/T``-norm of the losses, ``T * log(sum(L ** (1/T)))``."""
    t = check_temperature(temp)
    _, logL, _ = _positive_log_losses(losses, clamp, eps)
    return float(t * _logsumexp(logL / t))


def log_is_loss_grad(losses, temp, clamp=False, eps=DEFAULT_CLAMP_EPS):
    """Gradient of :func:`log_is_loss`: ``w_i / L_i``.

    Entries floored by the clamp get zero gradient, since the aggregate does
    not depend on them locally.
    """
    t = check_temperature(temp)
    L, logL, clamped = _positive_log_losses(losses, clamp, eps)
    w = np.exp(_log_softmax(logL / t))
    w = w / np.sum(w)
    grad = w / L
    grad[clamped] = 0.0
    return grad


def empirical_kl(weights):
    """KL divergence of a weight vector from the uniform distribution, in nats.

    Uses ``0 log 0 = 0``. Tiny negative round-off is clipped to zero.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise DomainError("weight vector is empty")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite and nonnegative")
    if abs(np.sum(w) - 1.0) > 1e-9:
        raise DomainError(f"weights must sum to 1, got {np.sum(w)!r}")
    pos = w[w > 0.0]
    return max(0.0, float(np.sum(pos * np.log(pos)) + math.log(w.size)))
