"""Desk-scale trainer: a linear embedding followed by a margin-softmax head.

The model maps raw inputs ``X`` (``n x d_in``) to embeddings ``X @ projection``
(``n x d``); the head compares embeddings to class-weight columns by cosine.
Training is plain mini-batch SGD with heavy-ball momentum, coupled weight
decay and a step learning-rate schedule. After every epoch a full forward pass
records per-sample losses and their log-IS weights, which is what the
concentration analysis reads.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import check_temperature, empirical_kl, log_is_loss, log_is_weights
from .exceptions import DomainError, TrainingDivergedError
from .gradcheck import numerical_grad, relative_error
from .margin import AGGREGATES, LOG_IS, MEAN_CE, MarginConfig, cosine_matrix, head_backward, head_forward, margin_loss_per_sample


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 20
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 10.0
    temp: float = 0.5
    aggregate: str = LOG_IS
    seed: int = 0
    embedding_dim: int = 32
    clamp_eps: float = None
    top_k: int = 10

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if not self.lr > 0:
            raise DomainError(f"lr must be positive, got {self.lr!r}")
        if not 0 <= self.momentum < 1:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if self.weight_decay < 0:
            raise DomainError(f"weight_decay must be nonnegative, got {self.weight_decay!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.embedding_dim < 1 or self.top_k < 1:
            raise DomainError("batch_size, embedding_dim and top_k must be positive; epochs nonnegative")
        if not self.lr_decay_factor > 0:
            raise DomainError(f"lr_decay_factor must be positive, got {self.lr_decay_factor!r}")
        if self.aggregate not in AGGREGATES:
            raise DomainError(f"unknown aggregate {self.aggregate!r}; expected one of {AGGREGATES}")
        if self.clamp_eps is not None and not self.clamp_eps > 0:
            raise DomainError(f"clamp_eps must be positive or None, got {self.clamp_eps!r}")
        self.temp = check_temperature(self.temp)

    @property
    def clamp(self):
        return self.clamp_eps is not None

    def lr_at_epoch(self, epoch):
        """Learning rate for 1-based ``epoch``: divided by the factor at every decay epoch reached."""
        passed = sum(1 for d in self.lr_decay_epochs if d <= epoch)
        return self.lr * self.lr_decay_factor ** (-passed)


@dataclass
class ModelParams:
    projection: np.ndarray
    class_weights: np.ndarray

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.projection.ndim != 2 or self.class_weights.ndim != 2:
            raise DomainError("projection and class weights must be 2-D")
        if self.projection.shape[1] != self.class_weights.shape[0]:
            raise DomainError("projection output dim must match class-weight rows")

    @property
    def n_inputs(self):
        return self.projection.shape[0]

    @property
    def embedding_dim(self):
        return self.projection.shape[1]

    @property
    def n_classes(self):
        return self.class_weights.shape[1]

    def embed(self, X):
        return np.asarray(X, dtype=np.float64) @ self.projection

    def copy(self):
        return ModelParams(self.projection.copy(), self.class_weights.copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.projection)) and np.all(np.isfinite(self.class_weights)))


@dataclass
class EpochTrace:
    epoch: int
    lr: float
    mean_loss: float
    aggregate_loss: float
    kl_concentration: float
    per_class_accuracy: dict
    top_weights: list  # (sample_id, class_id, weight), heaviest first
    losses: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)


def init_params(n_inputs, embedding_dim, n_classes, rng):
    scale = 1.0 / math.sqrt(n_inputs)
    projection = rng.uniform(-1.0, 1.0, size=(n_inputs, embedding_dim)) * scale
    class_weights = rng.uniform(-1.0, 1.0, size=(embedding_dim, n_classes)) * scale
    return ModelParams(projection, class_weights)


def model_gradients(params, X, y, margin_cfg, temp=0.5, aggregate=LOG_IS, clamp_eps=None):
    """Batch loss and gradients w.r.t. the projection and class weights."""
    clamp = clamp_eps is not None
    eps = clamp_eps if clamp else 1e-12
    E = params.embed(X)
    value, gE, gW, ce = head_backward(E, y, params.class_weights, margin_cfg, temp, aggregate, clamp, eps)
    return value, X.T @ gE, gW, ce


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """One heavy-ball step; ``velocity`` (list of arrays or None) is updated in place."""
    new = []
    for i, (p, g) in enumerate(zip((params.projection, params.class_weights), grads)):
        d = g + weight_decay * p
        if momentum:
            velocity[i] = momentum * velocity[i] + d
            d = velocity[i]
        new.append(p - lr * d)
    return ModelParams(*new)


def predict_classes(params, X):
    """Nearest class by cosine between embedding and class-weight column."""
    return np.argmax(cosine_matrix(params.embed(X), params.class_weights), axis=1)


def _epoch_trace(epoch, lr, params, X, y, margin_cfg, cfg):
    E = params.embed(X)
    losses = margin_loss_per_sample(E, y, params.class_weights, margin_cfg)
    if not np.all(np.isfinite(losses)):
        return None
    eps = cfg.clamp_eps if cfg.clamp else 1e-12
    weights = log_is_weights(losses, cfg.temp, clamp=cfg.clamp, eps=eps)
    if cfg.aggregate == MEAN_CE:
        agg = float(np.mean(losses))
    else:
        agg = log_is_loss(losses, cfg.temp, clamp=cfg.clamp, eps=eps)
    pred = np.argmax(cosine_matrix(E, params.class_weights), axis=1)
    per_class = {int(k): float(np.mean(pred[y == k] == k)) for k in np.unique(y)}
    k = min(cfg.top_k, y.size)
    order = np.lexsort((np.arange(y.size), -weights))[:k]
    top = [(int(i), int(y[i]), float(weights[i])) for i in order]
    return EpochTrace(
        epoch=epoch,
        lr=lr,
        mean_loss=float(np.mean(losses)),
        aggregate_loss=float(agg),
        kl_concentration=empirical_kl(weights),
        per_class_accuracy=per_class,
        top_weights=top,
        losses=losses,
        weights=weights,
    )


def _check_dataset(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("dataset must be a nonempty n x d_in matrix")
    if y.shape != (X.shape[0],):
        raise DomainError("labels must have one entry per row")
    if not np.all(np.isfinite(X)):
        raise DomainError("dataset contains non-finite values")
    y = y.astype(np.int64)
    K = int(y.max()) + 1
    if y.min() < 0 or np.unique(y).size != K:
        raise DomainError("class labels must be dense integers 0..K-1")
    return X, y, K


def train(X, y, cfg=None, margin_cfg=None, init=None):
    """Train a linear embedding with a margin head.

    Returns ``(params, traces)`` with one :class:`EpochTrace` per epoch.
    Deterministic for a fixed ``cfg.seed``. A non-finite loss aborts with
    :class:`TrainingDivergedError` holding the traces recorded so far.
    """
    cfg = cfg or TrainConfig()
    margin_cfg = margin_cfg or MarginConfig.arc()
    X, y, K = _check_dataset(X, y)
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(X.shape[1], cfg.embedding_dim, K, rng)
    if params.n_inputs != X.shape[1] or params.n_classes < K:
        raise DomainError("initial parameters do not match the dataset shape")
    traces = []
    velocity = [np.zeros_like(params.projection), np.zeros_like(params.class_weights)]
    n = X.shape[0]
    # divergence is detected explicitly below, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.lr_at_epoch(epoch)
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                value, gP, gW, _ = model_gradients(params, X[idx], y[idx], margin_cfg, cfg.temp, cfg.aggregate, cfg.clamp_eps)
                if not math.isfinite(value) or not (np.all(np.isfinite(gP)) and np.all(np.isfinite(gW))):
                    raise TrainingDivergedError(f"non-finite batch loss in epoch {epoch}", traces)
                params = sgd_step(params, (gP, gW), velocity, lr, cfg.momentum, cfg.weight_decay)
            trace = _epoch_trace(epoch, lr, params, X, y, margin_cfg, cfg)
            if trace is None or not params.is_finite():
                raise TrainingDivergedError(f"non-finite loss after epoch {epoch}", traces)
            traces.append(trace)
    return params, traces


@dataclass
class ConcentrationRow:
    epoch: int
    kl: float
    top_ids: list
    hard_class_overlap: float
    class_mass: dict


def weight_concentration_report(traces, bottom_k=1):
    """How concentrated the IS weights are, epoch by epoch.

    For each trace: the empirical KL of the weight vector from uniform, the
    fraction of top-weighted samples whose class is among the ``bottom_k``
    lowest-accuracy classes, and each class's share of the top-weight mass.
    """
    if not traces:
        raise DomainError("empty trace")
    rows = []
    for tr in traces:
        ranked = sorted(tr.per_class_accuracy.items(), key=lambda kv: (kv[1], kv[0]))
        hard = {c for c, _ in ranked[:bottom_k]}
        total = sum(w for _, _, w in tr.top_weights)
        mass = {}
        for _, c, w in tr.top_weights:
            mass[c] = mass.get(c, 0.0) + w
        mass = {c: (v / total if total > 0 else 0.0) for c, v in sorted(mass.items())}
        overlap = sum(1 for _, c, _ in tr.top_weights if c in hard) / len(tr.top_weights)
        rows.append(ConcentrationRow(tr.epoch, empirical_kl(tr.weights), [i for i, _, _ in tr.top_weights], overlap, mass))
    return rows


def gradient_check(params, X, y, margin_cfg, temp=0.5, aggregate=LOG_IS, clamp_eps=None, h=1e-6):
    """Max relative error between analytic and central-difference gradients over all parameters."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    clamp = clamp_eps is not None
    eps = clamp_eps if clamp else 1e-12
    _, gP, gW, _ = model_gradients(params, X, y, margin_cfg, temp, aggregate, clamp_eps)

    def f_proj(P):
        return head_forward(X @ P, y, params.class_weights, margin_cfg, temp, aggregate, clamp, eps)

    def f_cls(W):
        return head_forward(X @ params.projection, y, W, margin_cfg, temp, aggregate, clamp, eps)

    fP = numerical_grad(f_proj, params.projection, h)
    fW = numerical_grad(f_cls, params.class_weights, h)
    analytic = np.concatenate([gP.ravel(), gW.ravel()])
    numeric = np.concatenate([fP.ravel(), fW.ravel()])
    return relative_error(analytic, numeric)


class MarginEmbedding(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Linear embedding trained with ArcLoss/AddLoss, optionally IS-aggregated.

    ``transform`` returns embeddings for verification by cosine similarity;
    ``predict`` assigns the class whose weight column is closest in angle.

    Parameters
    ----------
    n_components : int
        Embedding dimension.
    margin : {"additive-angular", "additive-cosine"}
    scale, margin_value : float
        Feature scale ``s`` and margin ``m``; ``margin_value=None`` picks the
        kind's default (0.5 angular, 0.35 cosine).
    aggregate : {"log-is", "mean-ce"}
        Batch aggregate of the per-sample losses.
    temperature : float
        Temperature of the log-IS aggregate and of the traced weights.
    """

    def __init__(
        self,
        n_components=32,
        margin="additive-angular",
        scale=64.0,
        margin_value=None,
        aggregate="log-is",
        temperature=0.5,
        lr=0.1,
        momentum=0.9,
        weight_decay=5e-4,
        batch_size=128,
        epochs=20,
        lr_decay_epochs=(),
        lr_decay_factor=10.0,
        clamp_eps=None,
        top_k=10,
        random_state=0,
    ):
        self.n_components = n_components
        self.margin = margin
        self.scale = scale
        self.margin_value = margin_value
        self.aggregate = aggregate
        self.temperature = temperature
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay_factor = lr_decay_factor
        self.clamp_eps = clamp_eps
        self.top_k = top_k
        self.random_state = random_state

    def _configs(self):
        cfg = TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_decay_epochs=self.lr_decay_epochs,
            lr_decay_factor=self.lr_decay_factor,
            temp=self.temperature,
            aggregate=self.aggregate,
            seed=self.random_state,
            embedding_dim=self.n_components,
            clamp_eps=self.clamp_eps,
            top_k=self.top_k,
        )
        return cfg, MarginConfig(self.margin, float(self.scale), self.margin_value)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        cfg, margin_cfg = self._configs()
        self.params_, self.trace_ = train(X, y_enc, cfg, margin_cfg)
        self.projection_ = self.params_.projection
        self.class_weights_ = self.params_.class_weights
        self.n_features_in_ = X.shape[1]
        return self

    def _validate(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        return self.params_.embed(self._validate(X))

    def predict(self, X):
        return self.classes_[predict_classes(self.params_, self._validate(X))]

    def sample_losses(self, X, y):
        """Per-sample margin losses under the fitted model."""
        X = self._validate(X)
        y_enc = np.searchsorted(self.classes_, np.asarray(y))
        _, margin_cfg = self._configs()
        return margin_loss_per_sample(self.params_.embed(X), y_enc, self.class_weights_, margin_cfg)
