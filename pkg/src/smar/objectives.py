"""Contrastive objectives over in-batch negatives, plus the fashion header."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smar import numerics as nx
from smar.numerics import NumericsError, Tensor

NORM_TOL = 1e-6


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ValueError("loss weights must have a positive sum")

    def as_dict(self) -> dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}


@dataclass
class ScoredBatch:
    """Row ``i`` of every item field is the positive for query row ``i``.

    Item fields may be ``None`` when the corresponding tower was not run.
    """

    query: Tensor
    text: Tensor | None = None
    image: Tensor | None = None
    multimodal: Tensor | None = None

    def __post_init__(self):
        B, k = self.query.shape
        for name in ("text", "image", "multimodal"):
            t = getattr(self, name)
            if t is not None and t.shape != (B, k):
                raise nx.DimensionError(f"{name} embeddings {t.shape} != query {self.query.shape}")


def score(e_q, e_s) -> float:
    """Inner product of two unit vectors."""
    e_q, e_s = np.asarray(e_q, dtype=np.float64), np.asarray(e_s, dtype=np.float64)
    for name, e in (("query", e_q), ("item", e_s)):
        if abs(np.linalg.norm(e) - 1.0) > NORM_TOL:
            raise NumericsError(f"{name} embedding is not unit-norm")
    return float(e_q @ e_s)


def per_example_nll(q_emb, s_emb, temperature: float = 1.0) -> Tensor:
    """Negative log-probability of each row's diagonal positive, shape ``[B]``."""
    q_emb, s_emb = nx.as_tensor(q_emb), nx.as_tensor(s_emb)
    if q_emb.shape[0] == 0:
        raise EmptyBatchError("in-batch loss over an empty batch")
    if q_emb.shape != s_emb.shape:
        raise nx.DimensionError(f"query {q_emb.shape} vs item {s_emb.shape}")
    logits = q_emb @ s_emb.T
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    logp = nx.log_softmax(logits, axis=1)
    eye = np.eye(q_emb.shape[0])
    return -nx.sum(logp * eye, axis=1)


def in_batch_ce(q_emb, s_emb, temperature: float = 1.0) -> Tensor:
    return nx.mean(per_example_nll(q_emb, s_emb, temperature))


def pretrain_loss(batch: ScoredBatch, w: LossWeights, temperature: float = 1.0) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of the text, image and multimodal alignment losses.

    Zero-weight terms are left out of the total (so their towers need not be
    run); components are reported for every tower present in ``batch``.
    """
    parts = {}
    total = None
    for key, field_name, weight in (("L_t", "text", w.alpha), ("L_i", "image", w.beta), ("L_m", "multimodal", w.gamma)):
        emb = getattr(batch, field_name)
        if emb is None:
            if weight > 0:
                raise ValueError(f"weight for {field_name} is positive but no {field_name} embeddings given")
            continue
        loss = in_batch_ce(batch.query, emb, temperature)
        parts[key] = loss
        if weight > 0:
            term = loss * weight
            total = term if total is None else total + term
    return total, parts


def predict_fashion(h_q, w, b) -> Tensor:
    """Probability that a query wants image-aware retrieval.

    ``h_q`` is detached: header gradients never reach the query tower.
    """
    h = nx.as_tensor(h_q).detach()
    if h.ndim == 1:
        return predict_fashion(nx.reshape(h, (1, -1)), w, b)[0]
    return nx.sigmoid(h @ nx.reshape(w, (-1, 1)) + b)[..., 0]


def header_loss(p, label) -> Tensor:
    """Binary cross-entropy of probability ``p`` against 0/1 ``label``."""
    p = nx.as_tensor(p)
    if np.any(p.data <= 0) or np.any(p.data >= 1):
        raise NumericsError("header probability must lie strictly inside (0, 1)")
    y = np.asarray(label, dtype=np.float64)
    loss = -(nx.log(p) * y + nx.log(1.0 - p) * (1.0 - y))
    return nx.mean(loss) if loss.ndim else loss


def header_logit_loss(h_q, w, b, labels) -> Tensor:
    """Header BCE computed from logits; equals ``header_loss`` without saturating."""
    h = nx.as_tensor(h_q).detach()
    z = (h @ nx.reshape(w, (-1, 1)) + b)[..., 0]
    y = np.asarray(labels, dtype=np.float64)
    return nx.mean(nx.softplus(z) - z * y)


def finetune_loss(batch: ScoredBatch, p_vec, temperature: float = 1.0) -> Tensor:
    """Per-example mix of multimodal and text losses weighted by ``p_vec``."""
    p = np.asarray(p_vec.data if isinstance(p_vec, Tensor) else p_vec, dtype=np.float64)
    B = batch.query.shape[0]
    if p.shape != (B,):
        raise ValueError(f"p_vec has shape {p.shape}, expected ({B},)")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p_vec entries must lie in [0, 1]")
    terms = None
    if batch.multimodal is not None:
        terms = per_example_nll(batch.query, batch.multimodal, temperature) * p
    elif np.any(p > 0):
        raise ValueError("multimodal embeddings required when any p > 0")
    if batch.text is not None:
        t = per_example_nll(batch.query, batch.text, temperature) * (1.0 - p)
        terms = t if terms is None else terms + t
    elif np.any(p < 1):
        raise ValueError("text embeddings required when any p < 1")
    return nx.mean(terms)
