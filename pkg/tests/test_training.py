import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from isloss.bench import make_label_noise_dataset
from isloss.core import log_is_weights
from isloss.exceptions import DomainError, TrainingDivergedError
from isloss.margin import LOG_IS, MEAN_CE, MarginConfig
from isloss.training import (
    EpochTrace,
    MarginEmbedding,
    ModelParams,
    TrainConfig,
    gradient_check,
    init_params,
    predict_classes,
    sgd_step,
    train,
    weight_concentration_report,
)


def two_gaussians(seed=0, n=50):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal([3.0, 0.0], 0.5, (n, 2)), rng.normal([-3.0, 0.0], 0.5, (n, 2))])
    return X, np.repeat([0, 1], n)


def separating_direction_exists(X, y, steps=3600):
    """Brute-force scan of unit directions for one that splits the classes through the origin."""
    for a in np.linspace(0.0, 2 * math.pi, steps, endpoint=False):
        proj = X @ np.array([math.cos(a), math.sin(a)])
        if proj[y == 0].min() > 0 and proj[y == 1].max() < 0:
            return True
    return False


def trace_from_losses(losses, epoch=1, labels=None, temp=0.5, top_k=10):
    losses = np.asarray(losses, dtype=float)
    labels = np.zeros(losses.size, dtype=int) if labels is None else np.asarray(labels)
    w = log_is_weights(losses, temp)
    order = np.lexsort((np.arange(w.size), -w))[:top_k]
    top = [(int(i), int(labels[i]), float(w[i])) for i in order]
    acc = {int(c): 1.0 for c in np.unique(labels)}
    return EpochTrace(epoch, 0.1, float(losses.mean()), 0.0, 0.0, acc, top, losses, w)


def test_separable_two_gaussians_mean_ce():
    X, y = two_gaussians()
    assert separating_direction_exists(X, y)
    cfg = TrainConfig(epochs=20, batch_size=16, aggregate=MEAN_CE, lr_decay_epochs=(10, 15))
    params, traces = train(X, y, cfg, MarginConfig.arc())
    assert len(traces) == 20
    assert np.mean(predict_classes(params, X) == y) == 1.0
    assert params.is_finite()


def test_log_is_loss_settles_after_decay():
    X, y = two_gaussians()
    cfg = TrainConfig(epochs=20, batch_size=16, aggregate=LOG_IS, temp=0.5, lr_decay_epochs=(10, 15))
    params, traces = train(X, y, cfg, MarginConfig.arc())
    assert np.mean(predict_classes(params, X) == y) == 1.0
    after = [t.aggregate_loss for t in traces if t.epoch >= 10]
    for prev, cur in zip(after, after[1:]):
        assert cur <= prev + 0.05 * abs(prev)


def test_zero_epochs_returns_init():
    X, y = two_gaussians(n=5)
    init = init_params(2, 4, 2, np.random.default_rng(3))
    params, traces = train(X, y, TrainConfig(epochs=0), init=init)
    assert traces == []
    np.testing.assert_array_equal(params.projection, init.projection)
    np.testing.assert_array_equal(params.class_weights, init.class_weights)


def test_training_is_bit_deterministic():
    X, y, _ = make_label_noise_dataset(samples_per_class=20)
    cfg = TrainConfig(epochs=4, batch_size=16, embedding_dim=8, seed=42)
    p1, t1 = train(X, y, cfg, MarginConfig.add(s=16))
    p2, t2 = train(X, y, cfg, MarginConfig.add(s=16))
    np.testing.assert_array_equal(p1.projection, p2.projection)
    for a, b in zip(t1, t2):
        assert (a.epoch, a.lr, a.mean_loss, a.aggregate_loss, a.kl_concentration) == (
            b.epoch, b.lr, b.mean_loss, b.aggregate_loss, b.kl_concentration)
        assert a.top_weights == b.top_weights and a.per_class_accuracy == b.per_class_accuracy
        np.testing.assert_array_equal(a.losses, b.losses)
    _, t3 = train(X, y, TrainConfig(epochs=4, batch_size=16, embedding_dim=8, seed=43), MarginConfig.add(s=16))
    assert t3[-1].mean_loss != t1[-1].mean_loss


def test_weight_decay_shrinks_geometrically():
    rng = np.random.default_rng(0)
    params = ModelParams(rng.normal(size=(4, 3)), rng.normal(size=(3, 2)))
    zero = (np.zeros((4, 3)), np.zeros((3, 2)))
    lr, wd = 0.1, 5e-4
    n0 = np.linalg.norm(params.projection)
    for step in range(1, 11):
        params = sgd_step(params, zero, [None, None], lr, 0.0, wd)
        assert np.linalg.norm(params.projection) == pytest.approx(n0 * (1 - lr * wd) ** step, rel=1e-13)


@given(
    lr=st.floats(1e-4, 1.0),
    factor=st.floats(1.5, 20.0),
    decays=st.lists(st.integers(1, 30), max_size=4),
    epoch=st.integers(1, 40),
)
def test_lr_schedule_formula(lr, factor, decays, epoch):
    cfg = TrainConfig(lr=lr, lr_decay_epochs=decays, lr_decay_factor=factor)
    passed = sum(1 for d in decays if d <= epoch)
    assert cfg.lr_at_epoch(epoch) == pytest.approx(lr * factor**-passed, rel=1e-12)


def test_trace_lr_follows_schedule_and_weights_follow_losses():
    X, y, _ = make_label_noise_dataset(samples_per_class=15)
    cfg = TrainConfig(epochs=6, batch_size=16, embedding_dim=8, lr_decay_epochs=(2, 4), lr_decay_factor=10)
    _, traces = train(X, y, cfg, MarginConfig.arc(s=16))
    assert [t.lr for t in traces] == [cfg.lr_at_epoch(e) for e in range(1, 7)]
    assert traces[1].lr == pytest.approx(0.01) and traces[3].lr == pytest.approx(0.001)
    for t in traces:
        order = np.argsort(t.losses, kind="stable")
        assert np.all(np.diff(t.weights[order]) >= 0)
        ws = [w for _, _, w in t.top_weights]
        assert ws == sorted(ws, reverse=True)


@pytest.mark.parametrize("aggregate", [MEAN_CE, LOG_IS])
@pytest.mark.parametrize("margin", [MarginConfig.arc(s=8.0), MarginConfig.add(s=8.0)])
def test_gradient_check_tiny_models(aggregate, margin):
    rng = np.random.default_rng(5)
    for _ in range(5):
        d_in, d, K = (int(v) for v in rng.integers(2, 9, size=3))
        params = init_params(d_in, d, K, rng)
        X = rng.normal(size=(6, d_in))
        y = rng.integers(0, K, size=6)
        assert gradient_check(params, X, y, margin, temp=0.5, aggregate=aggregate) < 1e-4


def test_gradient_check_zero_input_batch_is_finite():
    rng = np.random.default_rng(6)
    params = init_params(4, 3, 3, rng)
    for aggregate in (MEAN_CE, LOG_IS):
        err = gradient_check(params, np.zeros((5, 4)), [0, 1, 2, 0, 1], MarginConfig.arc(), aggregate=aggregate)
        assert math.isfinite(err)


def test_concentration_uniform_losses_is_zero():
    rows = weight_concentration_report([trace_from_losses([0.7] * 12)])
    assert rows[0].kl == pytest.approx(0.0, abs=1e-12)


def test_concentration_dominant_sample_is_top1():
    losses = np.full(20, 0.1)
    losses[13] = 5.0
    rows = weight_concentration_report([trace_from_losses(losses)])
    assert rows[0].top_ids[0] == 13
    assert rows[0].kl > 0


def test_concentration_report_rejects_empty():
    with pytest.raises(DomainError):
        weight_concentration_report([])


def test_noisy_class_attracts_top_weights():
    X, y, noisy = make_label_noise_dataset(seed=0)
    cfg = TrainConfig(epochs=20, batch_size=32, embedding_dim=16)
    _, traces = train(X, y, cfg, MarginConfig.arc())
    final = weight_concentration_report(traces)[-1]
    assert final.class_mass.get(2, 0.0) > 0.5
    assert final.hard_class_overlap > 0.5
    # the heaviest samples are the mislabelled ones
    assert sum(noisy[i] for i in final.top_ids) >= 5


def test_divergence_raises_with_trace():
    X, y = two_gaussians(n=10)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as info:
        train(X, y, TrainConfig(lr=1e308, momentum=0.0, epochs=3))
    assert isinstance(info.value.trace, list)


@pytest.mark.parametrize(
    "kwargs",
    [dict(lr=0.0), dict(momentum=1.0), dict(weight_decay=-1.0), dict(batch_size=0), dict(aggregate="max"), dict(temp=0.0)],
)
def test_config_validation(kwargs):
    with pytest.raises(DomainError):
        TrainConfig(**kwargs)


def test_dataset_validation():
    X, y = two_gaussians(n=4)
    with pytest.raises(DomainError):
        train(X, y + 1)
    with pytest.raises(DomainError):
        train(np.zeros((0, 2)), np.zeros(0))


class TestEstimator:
    def test_params_roundtrip_and_clone(self):
        est = MarginEmbedding(n_components=8, aggregate="mean-ce", epochs=3)
        params = est.get_params()
        assert params["n_components"] == 8 and params["aggregate"] == "mean-ce"
        other = clone(est).set_params(temperature=0.25)
        assert other.temperature == 0.25 and est.temperature == 0.5

    def test_fit_transform_predict(self):
        X, y = two_gaussians()
        labels = np.where(y == 0, "left", "right")
        est = MarginEmbedding(n_components=4, epochs=10, batch_size=16).fit(X, labels)
        assert est.transform(X).shape == (100, 4)
        assert set(est.predict(X)) <= {"left", "right"}
        assert est.score(X, labels) == 1.0
        assert len(est.trace_) == 10 and est.n_features_in_ == 2
        assert est.sample_losses(X, labels).shape == (100,)

    def test_input_validation(self):
        X, y = two_gaussians(n=5)
        est = MarginEmbedding(epochs=1)
        with pytest.raises(Exception):
            est.predict(X)
        with pytest.raises(ValueError):
            est.fit(np.where(X > 0, np.nan, X), y)
        with pytest.raises(ValueError):
            est.fit(X, np.zeros(10))
        est.fit(X, y)
        with pytest.raises(ValueError):
            est.transform(np.ones((2, 3)))
        with pytest.raises(DomainError):
            MarginEmbedding(margin="sphere").fit(X, y)
