"""Evaluation metrics: clustering P/R/F (pairwise and BCubed), pair
verification (accuracy, TAR@FAR), closed-set identification, and the
Fréchet distance between embedding sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import UNASSIGNED, Clustering, EmbeddingSet, LabelSet
from .errors import ProbeIdMissing, TooFewSamples


@dataclass(frozen=True)
class VerificationProtocol:
    """List of (index_a, index_b, same_identity) pairs."""

    pairs: tuple[tuple[int, int, bool], ...]

    def __post_init__(self):
        pairs = tuple((int(a), int(b), bool(s)) for a, b, s in self.pairs)
        same = [s for _, _, s in pairs]
        if not any(same) or all(same):
            raise ValueError("need at least one positive and one negative pair")
        object.__setattr__(self, "pairs", pairs)


def _pair_counts(assignment: np.ndarray, labels: np.ndarray):
    """Contingency-based counts of same-cluster / same-label sample pairs."""
    num_c = int(assignment.max()) + 1
    num_l = int(labels.max()) + 1
    cont = np.zeros((num_c, num_l), dtype=np.int64)
    np.add.at(cont, (assignment, labels), 1)
    same_cluster = int(np.sum(cont.sum(axis=1) * (cont.sum(axis=1) - 1) // 2))
    same_label = int(np.sum(cont.sum(axis=0) * (cont.sum(axis=0) - 1) // 2))
    both = int(np.sum(cont * (cont - 1) // 2))
    return both, same_cluster, same_label


def pairwise_prf(c: Clustering, labels: LabelSet) -> tuple[float, float, float]:
    """Pairwise precision / recall / F1 over assigned samples."""
    mask = c.assignment != UNASSIGNED
    a = c.assignment[mask]
    l = labels.labels[mask]
    if a.size == 0:
        return 1.0, 0.0, 0.0
    both, same_cluster, same_label = _pair_counts(a, l)
    precision = both / same_cluster if same_cluster > 0 else 1.0
    recall = both / same_label if same_label > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def bcubed_prf(c: Clustering, labels: LabelSet) -> tuple[float, float, float]:
    """BCubed per-sample precision / recall means and their harmonic mean."""
    mask = c.assignment != UNASSIGNED
    a = c.assignment[mask]
    l = labels.labels[mask]
    if a.size == 0:
        return 1.0, 0.0, 0.0
    num_c = int(a.max()) + 1
    num_l = int(l.max()) + 1
    cont = np.zeros((num_c, num_l), dtype=np.int64)
    np.add.at(cont, (a, l), 1)
    cluster_sizes = cont.sum(axis=1)
    class_sizes = cont.sum(axis=0)
    inter = cont[a, l].astype(np.float64)
    precision = float(np.mean(inter / cluster_sizes[a]))
    recall = float(np.mean(inter / class_sizes[l]))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def coverage(c: Clustering) -> float:
    """Fraction of samples with a cluster assignment."""
    return float(np.mean(c.assignment != UNASSIGNED))


def verification_metrics(
    emb: EmbeddingSet, protocol: VerificationProtocol, fars: tuple[float, ...] = (1e-3, 1e-4)
) -> tuple[float, dict[float, float]]:
    """Best sweep accuracy plus TAR at each requested FAR.

    Pair score is the cosine similarity; the accuracy threshold is swept
    over all observed scores, and TAR@FAR uses the largest threshold-free
    TAR whose realized FAR stays within the bound.
    """
    rows = emb.rows / np.linalg.norm(emb.rows, axis=1)[:, None]
    ai = np.array([p[0] for p in protocol.pairs])
    bi = np.array([p[1] for p in protocol.pairs])
    same = np.array([p[2] for p in protocol.pairs], dtype=bool)
    scores = np.sum(rows[ai] * rows[bi], axis=1)

    pos = scores[same]
    neg = scores[~same]
    best_acc = 0.0
    for t in np.unique(scores):
        acc = (np.sum(pos >= t) + np.sum(neg < t)) / scores.size
        best_acc = max(best_acc, float(acc))

    neg_sorted = np.sort(neg)[::-1]
    tar_at_far: dict[float, float] = {}
    for far in fars:
        allowed = int(np.floor(far * neg.size))
        if allowed >= neg.size:
            threshold = -np.inf
        elif allowed == 0:
            threshold = np.nextafter(neg_sorted[0], np.inf)
        else:
            # pass exactly `allowed` negatives: threshold just above the
            # (allowed+1)-th largest negative
            threshold = np.nextafter(neg_sorted[allowed], np.inf)
        tar_at_far[far] = float(np.mean(pos >= threshold))
    return best_acc, tar_at_far


def identification_rank(
    gallery: tuple[EmbeddingSet, np.ndarray],
    probe: tuple[EmbeddingSet, np.ndarray],
    ks: tuple[int, ...] = (1, 5),
) -> dict[int, float]:
    """Closed-set identification rate at each rank k (ties to the lower
    gallery index)."""
    g_emb, g_ids = gallery
    p_emb, p_ids = probe
    g_ids = np.asarray(g_ids, dtype=np.int64)
    p_ids = np.asarray(p_ids, dtype=np.int64)
    missing = set(p_ids.tolist()) - set(g_ids.tolist())
    if missing:
        raise ProbeIdMissing(f"probe ids not in gallery: {sorted(missing)[:5]}")
    g_rows = g_emb.rows / np.linalg.norm(g_emb.rows, axis=1)[:, None]
    p_rows = p_emb.rows / np.linalg.norm(p_emb.rows, axis=1)[:, None]
    sims = p_rows @ g_rows.T
    # stable sort on gallery index breaks ties toward the lower index
    order = np.argsort(-sims, axis=1, kind="stable")
    rates: dict[int, float] = {}
    for k in ks:
        top = g_ids[order[:, :k]]
        hit = np.any(top == p_ids[:, None], axis=1)
        rates[k] = float(np.mean(hit))
    return rates


@dataclass(frozen=True)
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray


def frechet_stats(emb: EmbeddingSet, regularizer: float = 1e-6) -> FrechetStats:
    if emb.n < 2:
        raise TooFewSamples("need >= 2 samples for covariance")
    mean = emb.rows.mean(axis=0)
    centered = emb.rows - mean
    cov = centered.T @ centered / (emb.n - 1)
    cov = 0.5 * (cov + cov.T) + regularizer * np.eye(emb.d)
    return FrechetStats(mean=mean, cov=cov)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """Wasserstein-2 distance between Gaussian fits of two embedding sets."""
    sa = frechet_stats(a)
    sb = frechet_stats(b)
    diff = sa.mean - sb.mean
    root_a = _psd_sqrt(sa.cov)
    inner = _psd_sqrt(root_a @ sb.cov @ root_a)
    val = float(diff @ diff + np.trace(sa.cov + sb.cov - 2.0 * inner))
    return max(val, 0.0)


def build_verification_protocol(
    labels: LabelSet, pairs_per_class: int = 3, seed: int = 0
) -> VerificationProtocol:
    """Sample a balanced same/different pair list from ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pairs: list[tuple[int, int, bool]] = []
    n = labels.n
    for ident in range(labels.num_ids):
        members = np.flatnonzero(labels.labels == ident)
        if members.size < 2:
            continue
        for _ in range(pairs_per_class):
            a, b = rng.choice(members, size=2, replace=False)
            pairs.append((int(a), int(b), True))
            other = int(rng.integers(n))
            while labels.labels[other] == ident:
                other = int(rng.integers(n))
            pairs.append((int(a), other, False))
    return VerificationProtocol(tuple(pairs))
