"""Core data containers and bit-exact file I/O.

Embeddings are stored on disk as float32 (magic ``EMB1`` header) and held
in memory as float64; labels and clusterings travel as plain CSV.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DuplicateIndex,
    IoFailure,
    MissingIndex,
    NegativeLabel,
    TruncatedFile,
    ZeroDimension,
    ZeroNormRow,
)

MAGIC = b"EMB1"
UNASSIGNED = -1


@dataclass(frozen=True)
class EmbeddingSet:
    """n x d matrix of per-sample feature vectors."""

    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-D matrix")
        if rows.shape[0] < 1 or rows.shape[1] < 2:
            raise ValueError("need n >= 1 and d >= 2")
        object.__setattr__(self, "rows", rows)
        if self.normalized:
            norms = np.linalg.norm(rows, axis=1)
            if not np.all(np.abs(norms - 1.0) < 1e-5):
                raise ValueError("normalized flag set but rows are not unit-norm")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class LabelSet:
    """Per-sample identity ids, contiguous in [0, num_ids)."""

    labels: np.ndarray
    original_ids: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValueError("labels must be 1-D")
        if labels.size == 0:
            raise ValueError("labels must be non-empty")
        if labels.min() < 0:
            raise NegativeLabel("negative identity id")
        k = int(labels.max()) + 1
        present = np.bincount(labels, minlength=k)
        if np.any(present == 0):
            raise ValueError("identity ids must be contiguous with no gaps")
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def num_ids(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class Clustering:
    """Per-sample cluster assignment; UNASSIGNED (-1) marks rejected samples.

    ``p_minus`` optionally carries the per-sample probability of an
    incorrect assignment.
    """

    assignment: np.ndarray
    p_minus: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1:
            raise ValueError("assignment must be 1-D")
        assigned = a[a != UNASSIGNED]
        if assigned.size:
            if assigned.min() < 0:
                raise ValueError("cluster ids must be >= 0 or UNASSIGNED")
            k = int(assigned.max()) + 1
            if np.any(np.bincount(assigned, minlength=k) == 0):
                raise ValueError("cluster ids must be contiguous with no gaps")
        object.__setattr__(self, "assignment", a)
        if self.p_minus is not None:
            p = np.asarray(self.p_minus, dtype=np.float64)
            if p.shape != a.shape:
                raise ValueError("p_minus length must match assignment")
            if np.any(p < 0.0) or np.any(p > 1.0):
                raise ValueError("p_minus values must lie in [0, 1]")
            object.__setattr__(self, "p_minus", p)

    @property
    def n(self) -> int:
        return self.assignment.size

    @property
    def num_clusters(self) -> int:
        assigned = self.assignment[self.assignment != UNASSIGNED]
        return int(assigned.max()) + 1 if assigned.size else 0


@dataclass(frozen=True)
class LinearHead:
    """Multi-class linear classifier: rows of ``weights`` are per-class vectors."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 2:
            raise ValueError("weights must be a (num_classes >= 2) x d matrix")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (w.shape[0],):
                raise ValueError("bias must have one entry per class")
            object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    def logits(self, emb: EmbeddingSet) -> np.ndarray:
        from .errors import DimensionMismatch

        if emb.d != self.d:
            raise DimensionMismatch(f"head expects d={self.d}, got d={emb.d}")
        z = emb.rows @ self.weights.T
        if self.bias is not None:
            z = z + self.bias
        return z


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit L2 norm."""
    norms = np.linalg.norm(emb.rows, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroNormRow(int(zero[0]))
    return EmbeddingSet(emb.rows / norms[:, None], normalized=True)


def save_embeddings(emb: EmbeddingSet, path) -> None:
    """Write the EMB1 binary format: magic, n, d (u32 LE), float32 rows."""
    header = MAGIC + np.array([emb.n, emb.d], dtype="<u4").tobytes()
    payload = emb.rows.astype("<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_embeddings(path) -> EmbeddingSet:
    """Read the EMB1 binary format written by :func:`save_embeddings`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(blob) < 12:
        raise TruncatedFile(f"{path}: only {len(blob)} header bytes")
    if blob[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:4]!r}")
    n, d = (int(v) for v in np.frombuffer(blob[4:12], dtype="<u4"))
    if n == 0 or d == 0:
        raise ZeroDimension(f"{path}: header n={n}, d={d}")
    expected = 12 + 4 * n * d
    if len(blob) != expected:
        raise TruncatedFile(f"{path}: {len(blob)} bytes, expected {expected}")
    rows = np.frombuffer(blob[12:], dtype="<f4").astype(np.float64).reshape(n, d)
    return EmbeddingSet(rows, normalized=False)


def load_labels(path) -> LabelSet:
    """Parse ``index,label`` CSV; labels relabeled to contiguous ids.

    The original file ids survive in ``LabelSet.original_ids``
    (contiguous id -> file id).
    """
    try:
        with open(path, "r", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not rows or rows[0][:2] != ["index", "label"]:
        raise MissingIndex(f"{path}: expected 'index,label' header")
    seen: dict[int, int] = {}
    for row in rows[1:]:
        if len(row) != 2:
            raise MissingIndex(f"{path}: malformed row {row!r}")
        try:
            idx, raw = int(row[0]), int(row[1])
        except ValueError:
            raise NegativeLabel(f"{path}: non-integer field in {row!r}")
        if raw < 0:
            raise NegativeLabel(f"{path}: negative label in {row!r}")
        if idx in seen:
            raise DuplicateIndex(f"{path}: duplicate index {idx}")
        seen[idx] = raw
    n = len(seen)
    if n == 0:
        raise MissingIndex(f"{path}: no data rows")
    if set(seen) != set(range(n)):
        missing = sorted(set(range(n)) - set(seen))[:3]
        raise MissingIndex(f"{path}: indices not 0..{n - 1} (missing {missing})")
    raw_labels = np.array([seen[i] for i in range(n)], dtype=np.int64)
    uniq = np.unique(raw_labels)
    remap = {int(v): i for i, v in enumerate(uniq)}
    labels = np.array([remap[int(v)] for v in raw_labels], dtype=np.int64)
    return LabelSet(labels, original_ids={i: int(v) for i, v in enumerate(uniq)})


def save_labels(labels: LabelSet, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write("index,label\n")
            for i, lab in enumerate(labels.labels):
                fh.write(f"{i},{int(lab)}\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def save_clustering(c: Clustering, path) -> None:
    """Write ``index,cluster_id,p_minus`` CSV; UNASSIGNED as -1, absent p- empty."""
    try:
        with open(path, "w", newline="") as fh:
            fh.write("index,cluster_id,p_minus\n")
            for i, cid in enumerate(c.assignment):
                p = "" if c.p_minus is None else f"{c.p_minus[i]:.6f}"
                fh.write(f"{i},{int(cid)},{p}\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_clustering(path) -> Clustering:
    try:
        with open(path, "r", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not rows or rows[0][:3] != ["index", "cluster_id", "p_minus"]:
        raise MissingIndex(f"{path}: expected 'index,cluster_id,p_minus' header")
    seen: dict[int, tuple[int, float | None]] = {}
    any_p = False
    for row in rows[1:]:
        if len(row) != 3:
            raise MissingIndex(f"{path}: malformed row {row!r}")
        try:
            idx, cid = int(row[0]), int(row[1])
        except ValueError:
            raise NegativeLabel(f"{path}: non-integer field in {row!r}")
        if cid < UNASSIGNED:
            raise NegativeLabel(f"{path}: invalid cluster id {cid}")
        if idx in seen:
            raise DuplicateIndex(f"{path}: duplicate index {idx}")
        p = float(row[2]) if row[2] != "" else None
        if p is not None:
            any_p = True
        seen[idx] = (cid, p)
    n = len(seen)
    if n == 0 or set(seen) != set(range(n)):
        raise MissingIndex(f"{path}: indices not exactly 0..n-1")
    assignment = np.array([seen[i][0] for i in range(n)], dtype=np.int64)
    p_minus = None
    if any_p:
        p_minus = np.array(
            [seen[i][1] if seen[i][1] is not None else 0.0 for i in range(n)]
        )
    return Clustering(assignment, p_minus=p_minus)
