"""Synthetic embedding harness.

Generates identity-structured unit-norm embeddings (one spherical prototype
per identity, gaussian perturbation, renormalization), builds labeled /
unlabeled splits with controlled identity overlap, and injects the two
structured pseudo-label noise modes (outlier, split-id).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import UNASSIGNED, Clustering, EmbeddingSet, LabelSet
from .errors import InsufficientIds, RateOutOfRange


@dataclass(frozen=True)
class SynthConfig:
    num_ids: int
    samples_per_id: int
    dim: int
    within_id_sigma: float
    seed: int
    # long-tail option: per-id counts drawn log-uniform in
    # [samples_per_id, samples_per_id_max] when the max is set
    samples_per_id_max: int | None = None

    def __post_init__(self):
        if self.num_ids < 2:
            raise ValueError("num_ids must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.within_id_sigma < 0:
            raise ValueError("within_id_sigma must be >= 0")
        if self.samples_per_id < 1:
            raise ValueError("samples_per_id must be >= 1")
        if self.samples_per_id_max is not None and self.samples_per_id_max < self.samples_per_id:
            raise ValueError("samples_per_id_max must be >= samples_per_id")


@dataclass(frozen=True)
class SplitSpec:
    labeled_id_fraction: float
    overlap_id_fraction: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.labeled_id_fraction <= 1.0:
            raise ValueError("labeled_id_fraction must be in (0, 1]")
        if not 0.0 <= self.overlap_id_fraction <= 1.0:
            raise ValueError("overlap_id_fraction must be in [0, 1]")


def generate_identities(cfg: SynthConfig) -> tuple[EmbeddingSet, LabelSet]:
    """Draw per-identity prototypes uniformly on the sphere and perturb.

    Deterministic given ``cfg.seed``; per-identity sub-streams keep the
    output independent of generation order.
    """
    root = np.random.SeedSequence(cfg.seed)
    id_seeds = root.spawn(cfg.num_ids)
    all_rows = []
    all_labels = []
    for ident in range(cfg.num_ids):
        rng = np.random.default_rng(id_seeds[ident])
        proto = rng.standard_normal(cfg.dim)
        proto /= np.linalg.norm(proto)
        if cfg.samples_per_id_max is None:
            count = cfg.samples_per_id
        else:
            lo, hi = np.log(cfg.samples_per_id), np.log(cfg.samples_per_id_max + 1)
            count = int(np.exp(rng.uniform(lo, hi)))
            count = max(cfg.samples_per_id, min(count, cfg.samples_per_id_max))
        noise = rng.standard_normal((count, cfg.dim)) * cfg.within_id_sigma
        rows = proto[None, :] + noise
        rows /= np.linalg.norm(rows, axis=1)[:, None]
        all_rows.append(rows)
        all_labels.append(np.full(count, ident, dtype=np.int64))
    emb = EmbeddingSet(np.vstack(all_rows), normalized=True)
    return emb, LabelSet(np.concatenate(all_labels))


def make_overlap_split(
    emb: EmbeddingSet, labels: LabelSet, spec: SplitSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partition samples into labeled / unlabeled with controlled id overlap.

    Identities are split into labeled-only, overlap and unlabeled-only
    groups. The labeled side gets all samples of labeled-only ids plus the
    first half (rounded down) of each overlap id's samples; everything else
    is unlabeled. Returns (labeled_idx, unlabeled_idx, gt_overlap_mask)
    where the mask flags unlabeled samples whose identity also appears in
    the labeled split.
    """
    num_ids = labels.num_ids
    n_overlap = int(round(spec.overlap_id_fraction * num_ids))
    remaining = num_ids - n_overlap
    n_labeled_only = int(round(spec.labeled_id_fraction * remaining))
    n_unlabeled_only = remaining - n_labeled_only
    if spec.overlap_id_fraction > 0 and n_overlap == 0:
        raise InsufficientIds("overlap fraction nonzero but no overlap ids")
    if remaining > 0 and n_labeled_only == 0:
        raise InsufficientIds("no labeled-only identities")
    if remaining > 0 and spec.labeled_id_fraction < 1.0 and n_unlabeled_only == 0:
        raise InsufficientIds("no unlabeled-only identities")
    if n_labeled_only == 0 and n_overlap == 0:
        raise InsufficientIds("labeled split would be empty")

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    perm = rng.permutation(num_ids)
    overlap_ids = set(perm[:n_overlap].tolist())
    labeled_ids = set(perm[n_overlap : n_overlap + n_labeled_only].tolist())

    labeled_idx: list[int] = []
    unlabeled_idx: list[int] = []
    for ident in range(num_ids):
        members = np.flatnonzero(labels.labels == ident)
        if ident in labeled_ids:
            labeled_idx.extend(members.tolist())
        elif ident in overlap_ids:
            half = len(members) // 2
            labeled_idx.extend(members[:half].tolist())
            unlabeled_idx.extend(members[half:].tolist())
        else:
            unlabeled_idx.extend(members.tolist())
    labeled = np.array(sorted(labeled_idx), dtype=np.int64)
    unlabeled = np.array(sorted(unlabeled_idx), dtype=np.int64)
    labeled_id_set = set(labels.labels[labeled].tolist())
    gt_overlap_mask = np.array(
        [int(labels.labels[i]) in labeled_id_set for i in unlabeled], dtype=bool
    )
    return labeled, unlabeled, gt_overlap_mask


def inject_label_noise(
    c: Clustering, labels: LabelSet, rate: float, mode: str, seed: int
) -> Clustering:
    """Corrupt a ground-truth-derived clustering with structured noise.

    ``outlier`` reassigns floor(rate * n) random samples to a random other
    cluster; ``split_id`` splits floor(rate * num_clusters) random clusters,
    moving a random half of each into a fresh cluster.
    """
    if not 0.0 <= rate < 1.0:
        raise RateOutOfRange(f"rate {rate} not in [0, 1)")
    if mode not in ("outlier", "split_id"):
        raise ValueError(f"unknown noise mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    assignment = c.assignment.copy()
    num_clusters = c.num_clusters

    if mode == "outlier":
        assigned = np.flatnonzero(assignment != UNASSIGNED)
        count = int(rate * assignment.size)
        count = min(count, assigned.size)
        if count and num_clusters >= 2:
            victims = rng.choice(assigned, size=count, replace=False)
            for i in victims:
                cur = assignment[i]
                offset = rng.integers(1, num_clusters)
                assignment[i] = (cur + offset) % num_clusters
    else:
        count = int(rate * num_clusters)
        if count:
            targets = rng.choice(num_clusters, size=count, replace=False)
            next_id = num_clusters
            for cid in targets:
                members = np.flatnonzero(assignment == cid)
                if members.size < 2:
                    continue
                half = members.size // 2
                moved = rng.choice(members, size=half, replace=False)
                assignment[moved] = next_id
                next_id += 1
    return _compact(assignment, c.p_minus)


def _compact(assignment: np.ndarray, p_minus) -> Clustering:
    """Relabel cluster ids to be contiguous, preserving first-seen order by id."""
    assigned = assignment != UNASSIGNED
    out = assignment.copy()
    if assigned.any():
        uniq = np.unique(assignment[assigned])
        remap = {int(v): i for i, v in enumerate(uniq)}
        out[assigned] = [remap[int(v)] for v in assignment[assigned]]
    return Clustering(out, p_minus=p_minus)
