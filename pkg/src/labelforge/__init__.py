"""labelforge: semi-supervised pseudo-labeling for embedding classifiers.

Separates identity-overlapping samples via extreme-value statistics,
clusters the disjoint remainder into pseudo-labels, estimates per-sample
clustering uncertainty, and retrains a cosine-margin classification head
with uncertainty-weighted losses.
"""

from .data import (
    UNASSIGNED,
    Clustering,
    EmbeddingSet,
    LabelSet,
    LinearHead,
    l2_normalize,
    load_clustering,
    load_embeddings,
    load_labels,
    save_clustering,
    save_embeddings,
    save_labels,
)

__version__ = "0.1.0"

__all__ = [
    "UNASSIGNED",
    "Clustering",
    "EmbeddingSet",
    "LabelSet",
    "LinearHead",
    "l2_normalize",
    "load_clustering",
    "load_embeddings",
    "load_labels",
    "save_clustering",
    "save_embeddings",
    "save_labels",
    "__version__",
]
