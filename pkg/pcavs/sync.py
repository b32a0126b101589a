"""Cosine similarity and the two-way InfoNCE loss of the speech-content space."""

import torch

from pcavs.errors import DegenerateInputError, InvalidArgumentError
from pcavs.models import ContrastiveBatch

_ZERO_NORM = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def cosine_similarity(a, b) -> torch.Tensor:
    """aᵀb / (|a| |b|) over the last axis, broadcasting the leading ones."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise InvalidArgumentError(f"feature lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na <= _ZERO_NORM).any()) or bool((nb <= _ZERO_NORM).any()):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return (a * b).sum(-1) / (na * nb)


def info_nce(positive_score, negative_scores, temperature: float = 1.0) -> torch.Tensor:
    """-log softmax of the positive among (positive, negatives).

    positive_score: (...), negative_scores: (..., N). Returns the per-row loss.
    """
    pos, neg = _as_tensor(positive_score), _as_tensor(negative_scores)
    if neg.ndim == 0 or neg.shape[-1] < 1:
        raise InvalidArgumentError("info_nce needs at least one negative score")
    if temperature <= 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {temperature}")
    if not (torch.isfinite(pos).all() and torch.isfinite(neg).all()):
        raise InvalidArgumentError("info_nce scores must be finite")
    logits = torch.cat([pos.unsqueeze(-1), neg.to(pos.dtype)], dim=-1) / temperature
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def sync_loss(batch: ContrastiveBatch, temperature: float = 1.0) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_c, L_v2a, L_a2v), each averaged over the batch; L_c = L_v2a + L_a2v."""
    pv, pa = batch.positive_visual, batch.positive_audio
    pos = cosine_similarity(pv, pa)
    v2a = info_nce(pos, cosine_similarity(pv.unsqueeze(-2), batch.negative_audios), temperature).mean()
    a2v = info_nce(pos, cosine_similarity(pa.unsqueeze(-2), batch.negative_visuals), temperature).mean()
    return v2a + a2v, v2a, a2v


def retrieval_hits(batch: ContrastiveBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-row booleans: does the aligned partner outscore every negative (v2a, a2v)?"""
    with torch.no_grad():
        pos = cosine_similarity(batch.positive_visual, batch.positive_audio)
        neg_a = cosine_similarity(batch.positive_visual.unsqueeze(-2), batch.negative_audios)
        neg_v = cosine_similarity(batch.positive_audio.unsqueeze(-2), batch.negative_visuals)
    return pos > neg_a.max(-1).values, pos > neg_v.max(-1).values
