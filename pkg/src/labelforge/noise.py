"""Cluster-assignment uncertainty.

Trains a softmax linear classifier on cluster assignments, scores each
sample's uncertainty (entropy, max-logit or class-margin), fits a Weibull
to the lower mode of the margin distribution and turns it into a
per-sample probability of incorrect clustering. Ground-truth diagnostics
(outlier / split-id tagging, average precision) live here too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import UNASSIGNED, Clustering, EmbeddingSet, LabelSet, LinearHead
from .errors import NoPositives, OneSidedData, TooFewClusters
from .evt import (
    MIN_SIDE_SAMPLES,
    WeibullParams,
    otsu_threshold,
    weibull_fit_mle,
    weibull_survival,
)

CORRECT = 0
OUTLIER = 1
SPLIT_ID = 2

METRICS = ("entropy", "max_logit", "class_margin")


@dataclass(frozen=True)
class NoiseModel:
    """Lower-mode Weibull over an uncertainty metric's score distribution."""

    metric: str
    otsu_t: float
    wb_low: WeibullParams


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_linear_classifier(
    emb: EmbeddingSet,
    c: Clustering,
    epochs: int = 30,
    lr: float = 1.0,
    l2: float = 1e-4,
    seed: int = 0,
    batch_size: int = 256,
) -> LinearHead:
    """Multinomial logistic regression on cluster assignments.

    UNASSIGNED samples are excluded; mini-batch gradient descent with an
    L2 penalty; bias-free so logits stay comparable across classes.
    """
    mask = c.assignment != UNASSIGNED
    X = emb.rows[mask]
    y = c.assignment[mask]
    K = c.num_clusters
    if K < 2:
        raise TooFewClusters(f"need >= 2 clusters, got {K}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    W = rng.standard_normal((K, emb.d)) * 0.01
    n = X.shape[0]
    order = np.arange(n)
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = X[idx], y[idx]
            probs = _softmax(xb @ W.T)
            probs[np.arange(len(idx)), yb] -= 1.0
            grad = probs.T @ xb / len(idx) + l2 * W
            W -= lr * grad
    return LinearHead(W)


def cross_entropy(head: LinearHead, emb: EmbeddingSet, y: np.ndarray) -> np.ndarray:
    """Per-sample negative log-likelihood of the given targets."""
    z = head.logits(emb)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(y)), y]


def uncertainty_scores(head: LinearHead, emb: EmbeddingSet, metric: str) -> np.ndarray:
    """Score each sample; higher always means *more confident* for
    max_logit / class_margin, and higher entropy means less confident."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    z = head.logits(emb)
    if metric == "max_logit":
        return z.max(axis=1)
    if metric == "class_margin":
        part = np.partition(z, -2, axis=1)
        return part[:, -1] - part[:, -2]
    probs = _softmax(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1)


def fit_noise_model(
    margin_scores, metric: str = "class_margin", n_bins: int = 256
) -> NoiseModel:
    """Otsu split of the score distribution, Weibull MLE on the lower mode."""
    x = np.asarray(margin_scores, dtype=np.float64).ravel()
    t = otsu_threshold(x, n_bins=n_bins)
    low = x[x < t]
    high = x[x >= t]
    if low.size < MIN_SIDE_SAMPLES or high.size < MIN_SIDE_SAMPLES:
        raise OneSidedData(
            f"sides of Otsu threshold too small: {low.size} / {high.size}"
        )
    return NoiseModel(metric=metric, otsu_t=t, wb_low=weibull_fit_mle(low))


def p_minus(m: NoiseModel, score) -> np.ndarray:
    """Probability of incorrect clustering: survival function of the
    lower-mode Weibull, clamped to [0, 1]; non-increasing in the score."""
    return np.clip(weibull_survival(m.wb_low, score), 0.0, 1.0)


def label_cluster_errors(c: Clustering, labels: LabelSet) -> np.ndarray:
    """Tag each assigned sample CORRECT, OUTLIER or SPLIT_ID (diagnostic).

    A cluster's identity is its modal label (ties to the smaller id);
    members with a different label are outliers. Each identity's "true
    cluster" is the cluster holding most of its samples (ties to the
    smaller cluster id); its samples elsewhere are split-id unless already
    outliers there. UNASSIGNED samples keep -1.
    """
    n = c.n
    tags = np.full(n, -1, dtype=np.int64)
    assignment = c.assignment
    num_clusters = c.num_clusters
    num_ids = labels.num_ids

    modal_label = np.full(num_clusters, -1, dtype=np.int64)
    for cid in range(num_clusters):
        members = np.flatnonzero(assignment == cid)
        counts = np.bincount(labels.labels[members], minlength=num_ids)
        modal_label[cid] = int(np.argmax(counts))

    # per identity: cluster with the largest share of its samples
    true_cluster = np.full(num_ids, -1, dtype=np.int64)
    for ident in range(num_ids):
        members = np.flatnonzero((labels.labels == ident) & (assignment != UNASSIGNED))
        if members.size == 0:
            continue
        counts = np.bincount(assignment[members], minlength=num_clusters)
        true_cluster[ident] = int(np.argmax(counts))

    for i in range(n):
        cid = assignment[i]
        if cid == UNASSIGNED:
            continue
        ident = labels.labels[i]
        if modal_label[cid] != ident:
            tags[i] = OUTLIER
        elif true_cluster[ident] != cid:
            tags[i] = SPLIT_ID
        else:
            tags[i] = CORRECT
    return tags


def average_precision(scores, positives) -> float:
    """AP of ranking by descending score (ties broken by original index)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positives, dtype=bool).ravel()
    if not pos.any():
        raise NoPositives("need at least one positive sample")
    order = np.lexsort((np.arange(s.size), -s))
    hits = pos[order]
    ranks = np.flatnonzero(hits) + 1
    cum_hits = np.arange(1, ranks.size + 1)
    return float(np.mean(cum_hits / ranks))


def save_noise_model(m: NoiseModel, path) -> None:
    payload = {
        "metric": m.metric,
        "otsu_t": m.otsu_t,
        "wb_low": {
            "shape_k": m.wb_low.shape_k,
            "scale_lambda": m.wb_low.scale_lambda,
            "shift": m.wb_low.shift,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_noise_model(path) -> NoiseModel:
    with open(path) as fh:
        payload = json.load(fh)
    return NoiseModel(
        metric=payload["metric"],
        otsu_t=payload["otsu_t"],
        wb_low=WeibullParams(**payload["wb_low"]),
    )
