"""Text formats for models, pair lists, traces and reports.

Floats are written with ``repr`` so that a write/read round trip is exact and
two runs with equal values produce equal bytes.
"""

import csv

import numpy as np

from .bench import PairSet
from .exceptions import DomainError
from .training import ModelParams

MODEL_HEADER = "isloss-model 1"


def save_model(params, path):
    """Versioned header, then each matrix as a ``rows cols`` line followed by its rows."""
    with open(path, "w", newline="\n") as fh:
        fh.write(MODEL_HEADER + "\n")
        for M in (params.projection, params.class_weights):
            fh.write(f"{M.shape[0]} {M.shape[1]}\n")
            for row in M:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_model(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MODEL_HEADER:
        raise DomainError(f"{path}: not an isloss model file (expected header {MODEL_HEADER!r})")
    pos = 1
    mats = []
    try:
        for _ in range(2):
            r, c = (int(t) for t in lines[pos].split())
            rows = [[float(t) for t in lines[pos + 1 + i].split()] for i in range(r)]
            M = np.array(rows, dtype=np.float64).reshape(r, c)
            mats.append(M)
            pos += 1 + r
    except (IndexError, ValueError) as exc:
        raise DomainError(f"{path}: malformed model file ({exc})") from exc
    params = ModelParams(*mats)
    if not params.is_finite():
        raise DomainError(f"{path}: model contains non-finite values")
    return params


def write_pairs(pairs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in zip(pairs.a, pairs.b, pairs.label, pairs.fold):
            w.writerow([int(v) for v in row])


def read_pairs(path, n_folds=10):
    rows = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    if rows.shape[1] != 4:
        raise DomainError(f"{path}: expected idx_a,idx_b,label,fold rows")
    if not np.all(np.isin(rows[:, 2], (0, 1))):
        raise DomainError(f"{path}: labels must be 0 or 1")
    return PairSet(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], n_folds)


def far_label(level):
    """``0.01 -> '1e-2'``: the FAR level as it appears in report column names."""
    mant, exp = f"{level:e}".split("e")
    mant = mant.rstrip("0").rstrip(".")
    return f"{mant}e{int(exp)}"


def write_report(reports, far_levels, path):
    """One row per test population: accuracy, mean fold threshold, TAR at each FAR level."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_population", "accuracy", "thr_mean"] + [f"tar@far{far_label(f)}" for f in far_levels])
        for name, r in reports.items():
            w.writerow([name, repr(r.accuracy), repr(r.threshold_mean)] + [repr(r.tar_at_far[f]) for f in far_levels])


def write_hard_pairs(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "rank", "idx_a", "idx_b", "similarity"])
        for kind, items in (("positive", report.hard_positives), ("negative", report.hard_negatives)):
            for rank, hp in enumerate(items, 1):
                w.writerow([kind, rank, hp.a, hp.b, repr(hp.similarity)])


def write_trace(traces, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "aggregate_loss", "lr", "kl_concentration"])
        for t in traces:
            w.writerow([t.epoch, repr(t.mean_loss), repr(t.aggregate_loss), repr(t.lr), repr(t.kl_concentration)])


def write_top_weights(traces, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "sample_id", "class_id", "weight"])
        for t in traces:
            for sample, cls, weight in t.top_weights:
                w.writerow([t.epoch, sample, cls, repr(weight)])
