"""Retraining with the additive cosine-margin loss.

The head classifies over the union of labeled identities and pseudo-label
clusters; pseudo samples can be down-weighted by (1 - p_minus)^gamma. An
optional residual encoder (identity at init, trainable nonlinearity)
provides the new feature space for a second clustering iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import UNASSIGNED, Clustering, EmbeddingSet, LabelSet, LinearHead
from .errors import (
    EmptyTrainingSet,
    LabelCollision,
    NoEncoder,
    NotNormalized,
)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 16.0
    margin_m: float = 0.35
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.margin_m <= 1.0:
            raise ValueError("margin must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass
class EncoderParams:
    """Residual map x -> normalize(x W + relu(x U) V); identity at init
    (W = I, V = 0) so the untrained encoder is a no-op."""

    W: np.ndarray
    U: np.ndarray
    V: np.ndarray

    @classmethod
    def identity(cls, d: int, seed: int = 0) -> "EncoderParams":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return cls(
            W=np.eye(d),
            U=rng.standard_normal((d, d)) * np.sqrt(1.0 / d),
            V=np.zeros((d, d)),
        )


@dataclass
class TrainedModel:
    head: LinearHead
    encoder: EncoderParams | None = None
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def cosine_loss(feature: np.ndarray, head: LinearHead, label_j: int, cfg: LossConfig) -> float:
    """Additive cosine-margin loss for one sample.

    Requires unit-norm feature and head rows; the margin is subtracted
    from the target-class cosine before scaling.
    """
    f = np.asarray(feature, dtype=np.float64)
    if abs(np.linalg.norm(f) - 1.0) > 1e-5:
        raise NotNormalized("feature must be unit-norm")
    norms = np.linalg.norm(head.weights, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise NotNormalized("head rows must be unit-norm")
    logits = cfg.alpha * (head.weights @ f)
    logits[label_j] -= cfg.alpha * cfg.margin_m
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    return float(log_z - shifted[label_j])


def weighted_loss(loss: float, p_minus_value: float, gamma: float) -> float:
    """Uncertainty modulation: (1 - p_minus)^gamma * loss."""
    return (1.0 - p_minus_value) ** gamma * loss


def _encode(enc: EncoderParams, X: np.ndarray):
    hidden = np.maximum(X @ enc.U, 0.0)
    pre = X @ enc.W + hidden @ enc.V
    norms = np.linalg.norm(pre, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    out = pre / safe[:, None]
    return out, (hidden, pre, safe)


def _loss_and_grads(
    W: np.ndarray,
    enc: EncoderParams | None,
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    cfg: LossConfig,
):
    """Weighted mean cosine-margin loss and gradients w.r.t. the raw head
    matrix (rows normalized inside) and, if present, the encoder params."""
    b = X.shape[0]
    row_norms = np.linalg.norm(W, axis=1)
    W_hat = W / row_norms[:, None]

    if enc is not None:
        F, (hidden, pre, safe) = _encode(enc, X)
    else:
        F = X

    logits = cfg.alpha * (F @ W_hat.T)
    logits[np.arange(b), y] -= cfg.alpha * cfg.margin_m
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    nll = np.log(exp.sum(axis=1)) - shifted[np.arange(b), y]
    total_w = weights.sum()
    loss = float(np.sum(weights * nll) / total_w)

    dlogits = probs.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits *= (weights / total_w)[:, None]
    dW_hat = cfg.alpha * (dlogits.T @ F)
    # back through per-row normalization of the head
    dot = np.sum(dW_hat * W_hat, axis=1, keepdims=True)
    dW = (dW_hat - W_hat * dot) / row_norms[:, None]

    d_enc = None
    if enc is not None:
        dF = cfg.alpha * (dlogits @ W_hat)
        # back through per-sample normalization of encoded features
        dot_f = np.sum(dF * F, axis=1, keepdims=True)
        dpre = (dF - F * dot_f) / safe[:, None]
        dWenc = X.T @ dpre
        dV = hidden.T @ dpre
        dhidden = (dpre @ enc.V.T) * (hidden > 0)
        dU = X.T @ dhidden
        d_enc = EncoderParams(W=dWenc, U=dU, V=dV)
    return loss, dW, d_enc


def _assemble(
    labeled: tuple[EmbeddingSet, LabelSet],
    pseudo: tuple[EmbeddingSet, Clustering] | None,
    gamma: float,
    use_weights: bool,
):
    emb_l, labels_l = labeled
    X = [emb_l.rows]
    y = [labels_l.labels]
    w = [np.ones(emb_l.n)]
    num_labeled_ids = labels_l.num_ids
    if pseudo is not None:
        emb_u, c = pseudo
        if emb_u.n != c.n:
            raise LabelCollision("pseudo embeddings and clustering disagree in length")
        mask = c.assignment != UNASSIGNED
        if mask.any():
            X.append(emb_u.rows[mask])
            y.append(c.assignment[mask] + num_labeled_ids)
            if use_weights and c.p_minus is not None:
                w.append((1.0 - c.p_minus[mask]) ** gamma)
            else:
                w.append(np.ones(int(mask.sum())))
    X = np.vstack(X)
    y = np.concatenate(y)
    w = np.concatenate(w)
    if X.shape[0] == 0:
        raise EmptyTrainingSet("no training samples")
    num_classes = int(y.max()) + 1
    if num_classes < 2:
        raise EmptyTrainingSet("need at least 2 classes to train the head")
    return X, y, w, num_classes


def train_head(
    labeled: tuple[EmbeddingSet, LabelSet],
    pseudo: tuple[EmbeddingSet, Clustering] | None,
    cfg: LossConfig,
    epochs: int = 40,
    lr: float = 0.1,
    seed: int = 0,
    use_weights: bool = False,
    with_encoder: bool = False,
    batch_size: int = 256,
) -> TrainedModel:
    """SGD from scratch on the union of labeled and pseudo-labeled samples.

    Pseudo cluster ids are offset past the labeled id range. Head rows are
    renormalized to the unit sphere after every step.
    """
    X, y, w, num_classes = _assemble(labeled, pseudo, cfg.gamma, use_weights)
    d = X.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    # class-mean init avoids the dead-class local optima of random rows
    W = rng.standard_normal((num_classes, d)) * 1e-3
    for j in range(num_classes):
        members = X[y == j]
        if members.shape[0]:
            W[j] += members.mean(axis=0)
    W /= np.linalg.norm(W, axis=1)[:, None]
    enc = EncoderParams.identity(d, seed=seed + 1) if with_encoder else None

    initial_loss, _, _ = _loss_and_grads(W, enc, X, y, w, cfg)
    n = X.shape[0]
    order = np.arange(n)
    enc_lr = lr * 0.1  # encoder moves slower than the head
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, dW, d_enc = _loss_and_grads(W, enc, X[idx], y[idx], w[idx], cfg)
            W -= lr * dW
            W /= np.linalg.norm(W, axis=1)[:, None]
            if enc is not None and d_enc is not None:
                enc.W -= enc_lr * d_enc.W
                enc.U -= enc_lr * d_enc.U
                enc.V -= enc_lr * d_enc.V
    final_loss, _, _ = _loss_and_grads(W, enc, X, y, w, cfg)
    return TrainedModel(
        head=LinearHead(W),
        encoder=enc,
        initial_loss=initial_loss,
        final_loss=final_loss,
    )


def embed(model: TrainedModel, emb: EmbeddingSet) -> EmbeddingSet:
    """Map embeddings through the trained encoder and renormalize."""
    if model.encoder is None:
        raise NoEncoder("model was trained without an encoder")
    out, _ = _encode(model.encoder, emb.rows)
    return EmbeddingSet(out, normalized=True)


def save_trained_model(model: TrainedModel, blob_path, sidecar_path) -> None:
    arrays = [model.head.weights]
    shapes = {"head": list(model.head.weights.shape)}
    if model.encoder is not None:
        arrays.extend([model.encoder.W, model.encoder.U, model.encoder.V])
        shapes["encoder"] = list(model.encoder.W.shape)
    flat = np.concatenate([a.ravel() for a in arrays]).astype("<f4")
    with open(blob_path, "wb") as fh:
        fh.write(flat.tobytes())
    meta = {
        "kind": "trained_head",
        "shapes": shapes,
        "initial_loss": model.initial_loss,
        "final_loss": model.final_loss,
    }
    with open(sidecar_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_trained_model(blob_path, sidecar_path) -> TrainedModel:
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    flat = np.fromfile(blob_path, dtype="<f4").astype(np.float64)
    hk, hd = meta["shapes"]["head"]
    offset = hk * hd
    head = LinearHead(flat[:offset].reshape(hk, hd))
    enc = None
    if "encoder" in meta["shapes"]:
        d, d2 = meta["shapes"]["encoder"]
        size = d * d2
        parts = []
        for _ in range(3):
            parts.append(flat[offset : offset + size].reshape(d, d2))
            offset += size
        enc = EncoderParams(W=parts[0], U=parts[1], V=parts[2])
    return TrainedModel(
        head=head,
        encoder=enc,
        initial_loss=meta["initial_loss"],
        final_loss=meta["final_loss"],
    )
