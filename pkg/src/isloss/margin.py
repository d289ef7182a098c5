"""Margin-softmax heads on normalized embeddings and their batch aggregates.

Features ``x_i`` (rows of an ``n x d`` matrix) and class weights ``W_j``
(columns of a ``d x K`` matrix) are l2-normalized, so every logit is ``s`` times
a cosine. The target logit carries a margin:

* additive-angular: ``s * cos(theta_y + m)``  (ArcLoss)
* additive-cosine:  ``s * (cos(theta_y) - m)``  (AddLoss)

Per-sample cross-entropies are then aggregated over the batch either by their
mean or by the log-IS aggregate ``T * log(sum(L_i ** (1/T)))``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_CLAMP_EPS, check_temperature, log_is_loss, log_is_loss_grad
from .exceptions import DomainError

ADDITIVE_ANGULAR = "additive-angular"
ADDITIVE_COSINE = "additive-cosine"
MARGIN_KINDS = (ADDITIVE_ANGULAR, ADDITIVE_COSINE)
DEFAULT_MARGINS = {ADDITIVE_ANGULAR: 0.5, ADDITIVE_COSINE: 0.35}

MEAN_CE = "mean-ce"
LOG_IS = "log-is"
AGGREGATES = (MEAN_CE, LOG_IS)

COS_CLAMP = 1e-7
NORM_EPS = 1e-12


@dataclass(frozen=True)
class MarginConfig:
    """Scale ``s``, margin ``m`` and margin kind.

    ``m`` defaults to 0.5 for the angular margin and 0.35 for the cosine margin.
    """

    kind: str = ADDITIVE_ANGULAR
    s: float = 64.0
    m: float = field(default=None)

    def __post_init__(self):
        if self.kind not in MARGIN_KINDS:
            raise DomainError(f"unknown margin kind {self.kind!r}; expected one of {MARGIN_KINDS}")
        if self.m is None:
            object.__setattr__(self, "m", DEFAULT_MARGINS[self.kind])
        if not (math.isfinite(self.s) and self.s > 0):
            raise DomainError(f"scale s must be positive, got {self.s!r}")
        if not math.isfinite(self.m):
            raise DomainError(f"margin m must be finite, got {self.m!r}")
        if self.kind == ADDITIVE_ANGULAR and not 0.0 <= self.m < math.pi:
            raise DomainError(f"angular margin must lie in [0, pi), got {self.m!r}")

    @classmethod
    def arc(cls, s=64.0, m=None):
        return cls(ADDITIVE_ANGULAR, s, m)

    @classmethod
    def add(cls, s=64.0, m=None):
        return cls(ADDITIVE_COSINE, s, m)


def normalize_rows(X):
    """Return ``(X / ||x_i||, norms)``; norms below ``NORM_EPS`` are floored."""
    norms = np.maximum(np.linalg.norm(X, axis=1), NORM_EPS)
    return X / norms[:, None], norms


def _norm_backward(grad_hat, hat, norms):
    # Jacobian of x -> x / ||x|| applied to grad_hat, row-wise
    raw = np.linalg.norm(hat, axis=1) * norms
    proj = np.sum(grad_hat * hat, axis=1, keepdims=True)
    out = (grad_hat - hat * proj) / norms[:, None]
    small = raw <= NORM_EPS
    if np.any(small):
        out[small] = grad_hat[small] / NORM_EPS
    return out


def _check_inputs(features, labels, class_weights):
    X = np.asarray(features, dtype=np.float64)
    W = np.asarray(class_weights, dtype=np.float64)
    if X.ndim != 2 or W.ndim != 2:
        raise DomainError("features must be n x d and class weights d x K")
    if X.shape[1] != W.shape[0]:
        raise DomainError(f"dimension mismatch: features have d={X.shape[1]}, class weights d={W.shape[0]}")
    y = np.asarray(labels)
    if y.shape != (X.shape[0],):
        raise DomainError(f"expected {X.shape[0]} labels, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise DomainError("labels must be integers")
        y = y.astype(np.int64)
    K = W.shape[1]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise DomainError(f"labels must lie in [0, {K}), got range [{y.min()}, {y.max()}]")
    return X, y.astype(np.int64), W


def cosine_matrix(features, class_weights):
    """Cosines between normalized feature rows and normalized class-weight columns."""
    xh, _ = normalize_rows(np.asarray(features, dtype=np.float64))
    wh, _ = normalize_rows(np.asarray(class_weights, dtype=np.float64).T)
    return xh @ wh.T


def _target_transform(cos_t, cfg):
    """Margin-adjusted target cosine and its derivative w.r.t. the raw cosine."""
    if cfg.kind == ADDITIVE_COSINE:
        return cos_t - cfg.m, np.ones_like(cos_t)
    c = np.clip(cos_t, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    theta = np.arccos(c)
    # keep theta + m <= pi so the target logit stays monotone in theta
    theta_c = np.minimum(theta, math.pi - cfg.m)
    phi = np.cos(theta_c + cfg.m)
    active = (c == cos_t) & (theta_c == theta)
    dphi = np.where(active, np.sin(theta_c + cfg.m) / np.sin(theta), 0.0)
    return phi, dphi


def _softmax_ce(logits, y):
    """Per-row cross-entropy and softmax, accurate when the loss is tiny."""
    n = logits.shape[0]
    rows = np.arange(n)
    t = logits - logits[rows, y][:, None]
    m = np.max(t, axis=1)
    e = np.exp(t - m[:, None])
    e[rows, np.argmax(t, axis=1)] = 0.0
    ce = m + np.log1p(e.sum(axis=1))
    probs = np.exp(t - ce[:, None])
    return ce, probs


def margin_logits(features, labels, class_weights, cfg):
    X, y, W = _check_inputs(features, labels, class_weights)
    cos = cosine_matrix(X, W)
    rows = np.arange(X.shape[0])
    phi, _ = _target_transform(cos[rows, y], cfg)
    logits = cfg.s * cos
    logits[rows, y] = cfg.s * phi
    return logits


def margin_loss_per_sample(features, labels, class_weights, cfg):
    """Per-sample margin cross-entropy for whichever kind ``cfg`` names."""
    X, y, W = _check_inputs(features, labels, class_weights)
    if X.shape[0] == 0:
        return np.zeros(0)
    ce, _ = _softmax_ce(margin_logits(X, y, W, cfg), y)
    return ce


def arc_loss_per_sample(features, labels, class_weights, cfg=None):
    cfg = cfg or MarginConfig.arc()
    if cfg.kind != ADDITIVE_ANGULAR:
        raise DomainError("arc_loss_per_sample needs an additive-angular config")
    return margin_loss_per_sample(features, labels, class_weights, cfg)


def add_loss_per_sample(features, labels, class_weights, cfg=None):
    cfg = cfg or MarginConfig.add()
    if cfg.kind != ADDITIVE_COSINE:
        raise DomainError("add_loss_per_sample needs an additive-cosine config")
    return margin_loss_per_sample(features, labels, class_weights, cfg)


def is_aggregate(per_sample, temp, clamp=False, eps=DEFAULT_CLAMP_EPS):
    """Batch-level log-IS aggregate of per-sample margin losses.

    Normalization runs over the batch, so the value depends on which samples
    share a batch.
    """
    return log_is_loss(per_sample, temp, clamp=clamp, eps=eps)


def _aggregate(ce, aggregate, temp, clamp, eps):
    if aggregate == MEAN_CE:
        return float(np.mean(ce)), np.full(ce.shape, 1.0 / ce.size)
    if aggregate == LOG_IS:
        return is_aggregate(ce, temp, clamp, eps), log_is_loss_grad(ce, temp, clamp, eps)
    raise DomainError(f"unknown aggregate {aggregate!r}; expected one of {AGGREGATES}")


def head_forward(features, labels, class_weights, cfg, temp=0.5, aggregate=LOG_IS, clamp=False, eps=DEFAULT_CLAMP_EPS):
    """Aggregate margin loss of a batch."""
    ce = margin_loss_per_sample(features, labels, class_weights, cfg)
    if aggregate == LOG_IS:
        check_temperature(temp)
    value, _ = _aggregate(ce, aggregate, temp, clamp, eps)
    return value


def head_backward(features, labels, class_weights, cfg, temp=0.5, aggregate=LOG_IS, clamp=False, eps=DEFAULT_CLAMP_EPS):
    """Aggregate loss and its gradients w.r.t. raw features and raw class weights.

    Returns ``(value, grad_features, grad_class_weights, per_sample_losses)``.
    """
    X, y, W = _check_inputs(features, labels, class_weights)
    if X.shape[0] == 0:
        raise DomainError("empty batch")
    if aggregate == LOG_IS:
        check_temperature(temp)
    n = X.shape[0]
    rows = np.arange(n)

    xh, xn = normalize_rows(X)
    wh, wn = normalize_rows(W.T)
    cos = xh @ wh.T
    phi, dphi = _target_transform(cos[rows, y], cfg)
    logits = cfg.s * cos
    logits[rows, y] = cfg.s * phi
    ce, probs = _softmax_ce(logits, y)
    value, g = _aggregate(ce, aggregate, temp, clamp, eps)

    dlogits = probs
    # p_y - 1 written as expm1(-ce): subtracting 1 loses everything when ce is tiny,
    # and the log-IS gradient divides by ce
    dlogits[rows, y] = np.expm1(-ce)
    dlogits *= g[:, None]
    dcos = cfg.s * dlogits
    dcos[rows, y] *= dphi

    grad_xh = dcos @ wh
    grad_wh = dcos.T @ xh
    grad_X = _norm_backward(grad_xh, xh, xn)
    grad_W = _norm_backward(grad_wh, wh, wn).T
    return value, grad_X, grad_W, ce
