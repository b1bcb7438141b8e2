import numpy as np
import pytest

from labelforge import errors
from labelforge.cluster import clustering_from_labels
from labelforge.data import UNASSIGNED
from labelforge.synth import (
    SplitSpec,
    SynthConfig,
    generate_identities,
    inject_label_noise,
    make_overlap_split,
)


def test_zero_sigma_collapses_to_prototype():
    cfg = SynthConfig(num_ids=3, samples_per_id=4, dim=8, within_id_sigma=0.0, seed=7)
    emb, labels = generate_identities(cfg)
    for ident in range(3):
        rows = emb.rows[labels.labels == ident]
        np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), atol=1e-12)


def test_determinism():
    cfg = SynthConfig(num_ids=5, samples_per_id=6, dim=16, within_id_sigma=0.3, seed=99)
    emb1, lab1 = generate_identities(cfg)
    emb2, lab2 = generate_identities(cfg)
    assert np.array_equal(emb1.rows, emb2.rows)
    assert np.array_equal(lab1.labels, lab2.labels)


def test_unit_norm():
    cfg = SynthConfig(num_ids=4, samples_per_id=10, dim=12, within_id_sigma=0.5, seed=1)
    emb, _ = generate_identities(cfg)
    np.testing.assert_allclose(np.linalg.norm(emb.rows, axis=1), 1.0, atol=1e-6)


def test_within_vs_cross_similarity():
    cfg = SynthConfig(num_ids=50, samples_per_id=40, dim=32, within_id_sigma=0.25, seed=3)
    emb, labels = generate_identities(cfg)
    sims = emb.rows @ emb.rows.T
    same = labels.labels[:, None] == labels.labels[None, :]
    np.fill_diagonal(same, False)
    off_diag = ~np.eye(emb.n, dtype=bool)
    within = sims[same].mean()
    cross = sims[off_diag & ~same].mean()
    assert within > cross


def test_long_tail_counts():
    cfg = SynthConfig(
        num_ids=30, samples_per_id=5, dim=8, within_id_sigma=0.1, seed=11,
        samples_per_id_max=50,
    )
    _, labels = generate_identities(cfg)
    counts = np.bincount(labels.labels)
    assert counts.min() >= 5 and counts.max() <= 50
    assert counts.min() < counts.max()


def _harness(num_ids=20, per_id=10, seed=0):
    cfg = SynthConfig(num_ids=num_ids, samples_per_id=per_id, dim=8,
                      within_id_sigma=0.2, seed=seed)
    return generate_identities(cfg)


def test_split_disjoint_no_overlap_mask():
    emb, labels = _harness()
    labeled, unlabeled, mask = make_overlap_split(
        emb, labels, SplitSpec(labeled_id_fraction=0.5, overlap_id_fraction=0.0, seed=1)
    )
    assert not mask.any()


def test_split_full_overlap():
    emb, labels = _harness()
    labeled, unlabeled, mask = make_overlap_split(
        emb, labels, SplitSpec(labeled_id_fraction=1.0, overlap_id_fraction=1.0, seed=1)
    )
    assert mask.all()


def test_split_group_sizes():
    cfg = SynthConfig(num_ids=100, samples_per_id=4, dim=8, within_id_sigma=0.1, seed=5)
    emb, labels = generate_identities(cfg)
    labeled, unlabeled, mask = make_overlap_split(
        emb, labels, SplitSpec(labeled_id_fraction=0.5, overlap_id_fraction=0.2, seed=2)
    )
    labeled_ids = set(labels.labels[labeled].tolist())
    unlabeled_ids = set(labels.labels[unlabeled].tolist())
    overlap_ids = labeled_ids & unlabeled_ids
    assert len(overlap_ids) == 20
    assert len(labeled_ids - overlap_ids) == 40
    assert len(unlabeled_ids - overlap_ids) == 40


def test_split_partition_property():
    emb, labels = _harness(seed=4)
    labeled, unlabeled, mask = make_overlap_split(
        emb, labels, SplitSpec(labeled_id_fraction=0.6, overlap_id_fraction=0.3, seed=9)
    )
    assert set(labeled.tolist()) | set(unlabeled.tolist()) == set(range(emb.n))
    assert not set(labeled.tolist()) & set(unlabeled.tolist())
    # mask is exactly the brute-force membership test
    labeled_id_set = set(labels.labels[labeled].tolist())
    expected = np.array([int(labels.labels[i]) in labeled_id_set for i in unlabeled])
    np.testing.assert_array_equal(mask, expected)


def test_split_insufficient_ids():
    emb, labels = _harness(num_ids=2)
    with pytest.raises(errors.InsufficientIds):
        make_overlap_split(
            emb, labels,
            SplitSpec(labeled_id_fraction=0.01, overlap_id_fraction=0.0, seed=0),
        )


def test_noise_rate_zero_unchanged():
    _, labels = _harness()
    c = clustering_from_labels(labels)
    out = inject_label_noise(c, labels, rate=0.0, mode="outlier", seed=0)
    np.testing.assert_array_equal(out.assignment, c.assignment)


def test_noise_rate_out_of_range():
    _, labels = _harness()
    c = clustering_from_labels(labels)
    with pytest.raises(errors.RateOutOfRange):
        inject_label_noise(c, labels, rate=1.0, mode="outlier", seed=0)


def test_outlier_noise_diff_count():
    cfg = SynthConfig(num_ids=10, samples_per_id=10, dim=8, within_id_sigma=0.1, seed=2)
    _, labels = generate_identities(cfg)  # n = 100
    c = clustering_from_labels(labels)
    out = inject_label_noise(c, labels, rate=0.2, mode="outlier", seed=3)
    assert int(np.sum(out.assignment != c.assignment)) == 20


def test_split_id_noise_moves_half():
    cfg = SynthConfig(num_ids=5, samples_per_id=10, dim=8, within_id_sigma=0.1, seed=2)
    _, labels = generate_identities(cfg)
    c = clustering_from_labels(labels)
    out = inject_label_noise(c, labels, rate=0.21, mode="split_id", seed=3)
    assert out.num_clusters == c.num_clusters + 1
    # exactly one original cluster lost exactly half its members
    moved = int(np.sum(out.assignment != c.assignment))
    assert moved == 5
    assert out.assignment[out.assignment != c.assignment].tolist() == [5] * 5 or moved == 5


def test_noise_preserves_invariants():
    _, labels = _harness(seed=8)
    c = clustering_from_labels(labels)
    for mode in ("outlier", "split_id"):
        out = inject_label_noise(c, labels, rate=0.3, mode=mode, seed=5)
        assigned = out.assignment[out.assignment != UNASSIGNED]
        assert np.array_equal(np.unique(assigned), np.arange(out.num_clusters))
