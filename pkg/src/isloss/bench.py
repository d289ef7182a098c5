"""Synthetic populations and the pair-based verification protocol.

A population is a Gaussian mixture: each identity (class) has a center drawn
around the population's shift vector, and samples scatter isotropically
around their center. Populations that differ in shift or noise play the role
of train/test distributions that drift apart.

Verification scores a pair by the cosine similarity of its two embeddings and
calls it positive above a threshold. Pairs are split into folds; each fold is
scored with the threshold that maximizes accuracy on the remaining folds.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError

DEFAULT_FOLDS = 10
DEFAULT_FAR_LEVELS = (1e-2, 1e-3)


@dataclass(frozen=True)
class PopulationSpec:
    """Generating parameters of one synthetic population.

    Identity centers are ``shift + N(0, spread^2)`` on the first
    ``signal_dims`` coordinates (all coordinates when ``None``) and equal to
    ``shift`` elsewhere; samples add ``N(0, noise^2)`` on every coordinate.
    """

    name: str
    class_count: int
    samples_per_class: int
    class_center_spread: float
    within_class_noise: float
    shift_vector: tuple
    seed: int = 0
    signal_dims: int = None

    def __post_init__(self):
        object.__setattr__(self, "shift_vector", tuple(float(v) for v in self.shift_vector))
        if self.class_count < 1 or self.samples_per_class < 1:
            raise DomainError("class_count and samples_per_class must be positive")
        if not self.class_center_spread > 0:
            raise DomainError("class_center_spread must be positive")
        if self.within_class_noise < 0:
            raise DomainError("within_class_noise must be nonnegative")
        if not self.shift_vector:
            raise DomainError("shift_vector must be nonempty (it fixes the input dimension)")
        if self.signal_dims is not None and not 1 <= self.signal_dims <= self.n_inputs:
            raise DomainError(f"signal_dims must lie in [1, {self.n_inputs}]")

    @property
    def n_inputs(self):
        return len(self.shift_vector)

    @property
    def n_signal(self):
        return self.n_inputs if self.signal_dims is None else self.signal_dims

    def marginal_moments(self):
        """Mean and diagonal variance of the population-level (center-marginalized) Gaussian."""
        mean = np.asarray(self.shift_vector)
        var = np.full(self.n_inputs, self.within_class_noise**2)
        var[: self.n_signal] += self.class_center_spread**2
        return mean, var


@dataclass
class PopulationData:
    X: np.ndarray
    y: np.ndarray
    centers: np.ndarray
    spec: PopulationSpec


def generate_population(spec):
    """Draw a labelled sample set (and its ground-truth centers) from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    d = spec.n_inputs
    shift = np.asarray(spec.shift_vector)
    centers = np.tile(shift, (spec.class_count, 1))
    centers[:, : spec.n_signal] += rng.normal(0.0, spec.class_center_spread, size=(spec.class_count, spec.n_signal))
    y = np.repeat(np.arange(spec.class_count), spec.samples_per_class)
    noise = rng.normal(0.0, 1.0, size=(y.size, d)) * spec.within_class_noise
    return PopulationData(centers[y] + noise, y, centers, spec)


def _diag_gauss_logpdf(x, mean, var):
    return -0.5 * (np.sum((x - mean) ** 2 / var, axis=1) + np.sum(np.log(2 * math.pi * var)))


def population_kl(p, q, n_samples=20000, seed=0):
    """Monte-Carlo estimate of KL(p || q) between two populations' generating Gaussians."""
    if p.n_inputs != q.n_inputs:
        raise DomainError("populations have different input dimensions")
    mp, vp = p.marginal_moments()
    mq, vq = q.marginal_moments()
    if np.any(vp <= 0) or np.any(vq <= 0):
        raise DomainError("KL needs nondegenerate variances")
    x = np.random.default_rng(seed).normal(size=(n_samples, p.n_inputs)) * np.sqrt(vp) + mp
    return float(np.mean(_diag_gauss_logpdf(x, mp, vp) - _diag_gauss_logpdf(x, mq, vq)))


def make_label_noise_dataset(n_classes=3, samples_per_class=60, n_inputs=8, noisy_class=2, noise_fraction=0.3, seed=0):
    """Well-separated classes where part of one class carries features of the others.

    Returns ``(X, y, noisy_mask)``. Mislabelled samples all carry the label
    ``noisy_class``, so that class is the known hard one.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, n_inputs))
    centers *= 4.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.repeat(np.arange(n_classes), samples_per_class)
    source = y.copy()
    members = np.flatnonzero(y == noisy_class)
    flipped = rng.choice(members, size=int(round(noise_fraction * members.size)), replace=False)
    others = [c for c in range(n_classes) if c != noisy_class]
    source[flipped] = rng.choice(others, size=flipped.size)
    X = centers[source] + rng.normal(0.0, 0.5, size=(y.size, n_inputs))
    mask = np.zeros(y.size, dtype=bool)
    mask[flipped] = True
    return X, y, mask


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class PairSet:
    a: np.ndarray
    b: np.ndarray
    label: np.ndarray  # 1 positive, 0 negative
    fold: np.ndarray
    n_folds: int = DEFAULT_FOLDS

    def __len__(self):
        return self.a.size

    def subset(self, mask):
        return PairSet(self.a[mask], self.b[mask], self.label[mask], self.fold[mask], self.n_folds)


def build_pairs(labels, positives_per_class, negatives_total, seed=0, n_folds=DEFAULT_FOLDS):
    """Sample distinct positive and negative pairs and assign folds.

    Each class contributes ``positives_per_class`` same-class pairs; negatives
    are ``negatives_total`` distinct cross-class pairs. After a seeded shuffle
    folds are assigned round-robin, so fold sizes differ by at most one.
    Every pair is stored with ``a < b``.
    """
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    pos = []
    if positives_per_class > 0:
        for c in classes:
            idx = np.flatnonzero(y == c)
            iu, ju = np.triu_indices(idx.size, k=1)
            if iu.size < positives_per_class:
                raise DomainError(f"class {c} has {idx.size} samples, too few for {positives_per_class} positive pairs")
            pick = np.sort(rng.choice(iu.size, size=positives_per_class, replace=False))
            pos.extend(zip(idx[iu[pick]], idx[ju[pick]]))
    neg = []
    if negatives_total > 0:
        if classes.size < 2:
            raise DomainError("negative pairs need at least two classes")
        counts = np.array([np.sum(y == c) for c in classes])
        available = (y.size**2 - int(np.sum(counts**2))) // 2
        if negatives_total > available:
            raise DomainError(f"only {available} distinct negative pairs exist, {negatives_total} requested")
        if negatives_total * 2 > available:
            iu, ju = np.triu_indices(y.size, k=1)
            cross = np.flatnonzero(y[iu] != y[ju])
            pick = np.sort(rng.choice(cross, size=negatives_total, replace=False))
            neg = list(zip(iu[pick], ju[pick]))
        else:
            seen = set()
            while len(neg) < negatives_total:
                i, j = rng.integers(0, y.size, size=2)
                if y[i] == y[j]:
                    continue
                key = (min(i, j), max(i, j))
                if key not in seen:
                    seen.add(key)
                    neg.append(key)
    pairs = np.array(pos + neg, dtype=np.int64).reshape(-1, 2)
    label = np.concatenate([np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)])
    order = rng.permutation(label.size)
    fold = np.arange(label.size) % n_folds
    return PairSet(pairs[order, 0], pairs[order, 1], label[order], fold, n_folds)


def pair_similarities(embeddings, pairs):
    E = np.asarray(embeddings, dtype=np.float64)
    if len(pairs) and (max(pairs.a.max(), pairs.b.max()) >= E.shape[0] or min(pairs.a.min(), pairs.b.min()) < 0):
        raise DomainError("pair index out of range")
    norms = np.linalg.norm(E, axis=1)
    used = np.concatenate([pairs.a, pairs.b])
    if np.any(norms[used] == 0.0):
        raise DomainError("cosine similarity of a zero embedding")
    A = E[pairs.a] / norms[pairs.a, None]
    B = E[pairs.b] / norms[pairs.b, None]
    return np.clip(np.sum(A * B, axis=1), -1.0, 1.0)


def threshold_candidates(sims):
    """Midpoints between consecutive distinct similarities, plus the sentinels -1 and 1."""
    u = np.unique(sims)
    mids = 0.5 * (u[1:] + u[:-1])
    return np.unique(np.concatenate([[-1.0], mids, [1.0]]))


def best_threshold(sims, labels):
    """Accuracy-maximizing threshold (lowest on ties) for the rule ``sim > threshold``."""
    sims = np.asarray(sims, dtype=np.float64)
    labels = np.asarray(labels)
    cand = threshold_candidates(sims)
    pos = np.sort(sims[labels == 1])
    neg = np.sort(sims[labels == 0])
    tp = pos.size - np.searchsorted(pos, cand, side="right")
    tn = np.searchsorted(neg, cand, side="right")
    acc = (tp + tn) / sims.size
    k = int(np.argmax(acc))
    return float(cand[k]), float(acc[k])


def rates_at(sims, labels, threshold):
    """``(TAR, FAR)`` of the rule ``sim > threshold``."""
    sims = np.asarray(sims)
    labels = np.asarray(labels)
    pos, neg = sims[labels == 1], sims[labels == 0]
    return float(np.mean(pos > threshold)), float(np.mean(neg > threshold))


def tar_at_far(sims, labels, level):
    """TAR at the smallest threshold whose false-accept rate is at most ``level``."""
    if not 0.0 < level < 1.0:
        raise DomainError(f"FAR level must lie in (0, 1), got {level!r}")
    sims = np.asarray(sims)
    labels = np.asarray(labels)
    pos, neg = sims[labels == 1], sims[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise DomainError("TAR@FAR needs both positive and negative pairs")
    neg_desc = np.sort(neg)[::-1]
    allowed = int(math.floor(level * neg.size + 1e-9))
    threshold = float(neg_desc[allowed])
    return float(np.mean(pos > threshold)), threshold


@dataclass(frozen=True)
class HardPair:
    a: int
    b: int
    similarity: float


def _hard_from_sims(pairs, sims, k):
    is_pos = pairs.label == 1
    if k > int(is_pos.sum()) or k > int((~is_pos).sum()) or k < 0:
        raise DomainError(f"k={k} exceeds the number of positive or negative pairs")
    p = np.flatnonzero(is_pos)
    n = np.flatnonzero(~is_pos)
    p = p[np.lexsort((pairs.b[p], pairs.a[p], sims[p]))][:k]
    n = n[np.lexsort((pairs.b[n], pairs.a[n], -sims[n]))][:k]
    mk = lambda i: HardPair(int(pairs.a[i]), int(pairs.b[i]), float(sims[i]))  # noqa: E731
    return [mk(i) for i in p], [mk(i) for i in n]


def hard_pairs(embeddings, pairs, k):
    """Lowest-similarity positives (ascending) and highest-similarity negatives (descending).

    Ties break on the pair's sample indices ``(a, b)``, so the result does not
    depend on the order of the pair list.
    """
    return _hard_from_sims(pairs, pair_similarities(embeddings, pairs), k)


@dataclass
class VerificationReport:
    fold_thresholds: list
    fold_accuracies: list
    accuracy: float
    tar_at_far: dict
    hard_positives: list = field(default_factory=list)
    hard_negatives: list = field(default_factory=list)

    @property
    def threshold_mean(self):
        return float(np.mean(self.fold_thresholds))


def verify(embeddings, pairs, far_levels=DEFAULT_FAR_LEVELS, hard_k=10):
    """Cross-validated verification accuracy, TAR@FAR and hard pairs."""
    for level in far_levels:
        if not 0.0 < level < 1.0:
            raise DomainError(f"FAR level must lie in (0, 1), got {level!r}")
    if len(pairs) < pairs.n_folds:
        raise DomainError(f"{pairs.n_folds}-fold protocol needs at least {pairs.n_folds} pairs, got {len(pairs)}")
    sims = pair_similarities(embeddings, pairs)
    thresholds, accs = [], []
    for f in range(pairs.n_folds):
        held = pairs.fold == f
        if not held.any() or held.all():
            raise DomainError(f"fold {f} is empty or holds every pair")
        thr, _ = best_threshold(sims[~held], pairs.label[~held])
        thresholds.append(thr)
        accs.append(float(np.mean((sims[held] > thr) == (pairs.label[held] == 1))))
    tar = {level: tar_at_far(sims, pairs.label, level)[0] for level in far_levels}
    k = min(hard_k, int(np.sum(pairs.label == 1)), int(np.sum(pairs.label == 0)))
    hp, hn = _hard_from_sims(pairs, sims, k)
    return VerificationReport(thresholds, accs, float(np.mean(accs)), tar, hp, hn)


@dataclass
class CrossPopulationResult:
    reports: dict  # population name -> VerificationReport
    pairs: dict  # population name -> PairSet

    def accuracies(self):
        return {name: r.accuracy for name, r in self.reports.items()}


def cross_population_eval(
    params,
    populations,
    far_levels=DEFAULT_FAR_LEVELS,
    positives_per_class=None,
    negatives_total=None,
    seed=0,
    hard_k=10,
    n_positive=600,
    n_negative=600,
):
    """Verify one trained model on each population.

    ``populations`` holds :class:`PopulationSpec` or already generated
    :class:`PopulationData`. Pair sampling is seeded per population from
    ``seed`` and the population's position, so two models evaluated with the
    same arguments see identical pairs. Without explicit counts, positives per
    class are chosen to total about ``n_positive`` and negatives default to
    ``n_negative``.
    """
    reports, pairsets = {}, {}
    for i, pop in enumerate(populations):
        data = pop if isinstance(pop, PopulationData) else generate_population(pop)
        K = data.spec.class_count
        ppc = positives_per_class if positives_per_class is not None else max(1, -(-n_positive // K))
        neg = negatives_total if negatives_total is not None else n_negative
        pair_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        pairs = build_pairs(data.y, ppc, neg, seed=pair_seed)
        reports[data.spec.name] = verify(params.embed(data.X), pairs, far_levels, hard_k)
        pairsets[data.spec.name] = pairs
    return CrossPopulationResult(reports, pairsets)


def accuracy_gains(baseline, candidate):
    """Per-population accuracy difference ``candidate - baseline``."""
    return {name: candidate.reports[name].accuracy - baseline.reports[name].accuracy for name in baseline.reports}


def accuracy_matrix(models, populations, **kwargs):
    """``{train name: {test name: accuracy}}`` for several trained models."""
    return {name: cross_population_eval(p, populations, **kwargs).accuracies() for name, p in models.items()}


def shift_benchmark(seed=0, n_inputs=16, signal_dims=8, classes=30, samples_per_class=20, levels=(1, 2, 3)):
    """A training population and test populations drifting away from it.

    Test population ``i`` has fresh identities, every coordinate of its mean
    moved by ``0.3 * i`` and its within-class noise inflated by ``1 + 0.5 * i``,
    so the generating-mixture KL from the training population grows with ``i``.
    """
    base = dict(class_count=classes, samples_per_class=samples_per_class, class_center_spread=1.0, signal_dims=signal_dims)
    train_spec = PopulationSpec("train", within_class_noise=0.6, shift_vector=[0.0] * n_inputs, seed=seed, **base)
    tests = [
        PopulationSpec(
            f"shift{i}",
            within_class_noise=0.6 * (1 + 0.5 * i),
            shift_vector=[0.3 * i] * n_inputs,
            seed=int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0]),
            **base,
        )
        for i in levels
    ]
    return train_spec, tests
