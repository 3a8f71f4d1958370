"""Attention-guided erasing of dominant query words.

The words the primary enhanced pass attends to most are replaced by the
"unknown" embedding, the query is scored again, and the two score maps are
blended with a learnable weight. A reconstruction loss asks the visual context
gathered by the erased pass to recover the erased word embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import torch
from torch import nn

from .data import TokenizedQuery
from .errors import AlignmentError, ArgumentError
from .visual_filter import uniform_init_


def word_dominance(delta, v_mask=None):
    """Total attention logit each word receives over all frames: [..., n_v, n_q] -> [..., n_q]."""
    if v_mask is not None:
        delta = delta * v_mask.unsqueeze(-1).to(delta.dtype)
    return delta.sum(dim=-2)


def erase_count(n_q: int, rate: float) -> int:
    """max(1, round(rate * n_q)), rounding halves away from zero."""
    if rate <= 0:
        raise ArgumentError("erase rate must be positive; skip erasing instead")
    exact = (Decimal(repr(float(rate))) * n_q).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, min(n_q, int(exact)))


def top_word_indices(dominance, rate: float) -> np.ndarray:
    """Indices of the erase_count most dominant words; ties go to the smaller index."""
    dom = np.asarray(dominance, dtype=np.float64).reshape(-1)
    n_e = erase_count(dom.shape[0], rate)
    order = np.lexsort((np.arange(dom.shape[0]), -dom))
    return np.sort(order[:n_e])


@dataclass
class ErasePlan:
    erased_indices: np.ndarray
    erased_query: TokenizedQuery
    erase_rate: float

    @property
    def n_e(self) -> int:
        return len(self.erased_indices)


def erase_top_words(query: TokenizedQuery, dominance, rate: float) -> ErasePlan:
    idx = top_word_indices(dominance, rate)
    emb = query.embeddings.copy()
    emb[idx] = query.unknown_token_embedding
    return ErasePlan(idx, replace(query, embeddings=emb), rate)


def erase_mask(dominance: torch.Tensor, rate: float, q_mask=None) -> torch.Tensor:
    """Batched form of :func:`top_word_indices`: bool [B, n_q], padded words never erased."""
    dom = dominance.detach().cpu().numpy()
    lengths = [dom.shape[1]] * dom.shape[0] if q_mask is None else q_mask.sum(-1).tolist()
    out = np.zeros(dom.shape, dtype=bool)
    for i, n in enumerate(lengths):
        out[i, top_word_indices(dom[i, :int(n)], rate)] = True
    return torch.from_numpy(out)


def apply_erasure(q, mask, unknown):
    """Replace masked word rows of q [B, n_q, d_q] by the unknown embedding [d_q]."""
    return torch.where(mask.unsqueeze(-1), unknown.expand_as(q), q)


def word_to_frame_attention(delta, stream, v_mask=None):
    """Softmax over frames per word, then per-word visual context [..., n_q, d]."""
    if v_mask is not None:
        delta = delta.masked_fill(~v_mask.to(torch.bool).unsqueeze(-1), float("-inf"))
    weights = torch.softmax(delta, dim=-2)                  # [..., n_v, n_q]
    return weights.transpose(-1, -2) @ stream, weights


def safe_cosine(x, y, dim=-1):
    """Cosine similarity that is 0 when either vector has zero norm."""
    dot = (x * y).sum(dim)
    norm = x.norm(dim=dim) * y.norm(dim=dim)
    nonzero = norm > 0
    return torch.where(nonzero, dot / torch.where(nonzero, norm, torch.ones_like(norm)), torch.zeros_like(dot))


def reconstruction_loss(context, q_orig, erased, recon_W):
    """Mean over erased words of (1 - cos(W context_j, q_j)) / 2, per sample.

    context: [..., n_q, d]; q_orig: [..., n_q, d_q]; erased: bool [..., n_q]
    (at least one True per sample); recon_W: [d_q, d].
    """
    cos = safe_cosine(context @ recon_W.transpose(0, 1), q_orig)
    w = erased.to(cos.dtype)
    return ((1.0 - cos) / 2.0 * w).sum(-1) / w.sum(-1)


def fuse_proposal_scores(primary, erased, weight):
    """weight * primary + (1 - weight) * erased, cell by cell."""
    if tuple(primary.shape) != tuple(erased.shape):
        raise AlignmentError(f"score maps differ in shape: {tuple(primary.shape)} vs {tuple(erased.shape)}")
    return weight * primary + (1.0 - weight) * erased


class EraseParams(nn.Module):
    def __init__(self, d_q: int, d_context: int):
        super().__init__()
        self.recon_W = nn.Parameter(torch.empty(d_q, d_context))
        # stored as a logit so the blend weight stays in (0, 1); starts at 0.5
        self.fusion_logit = nn.Parameter(torch.zeros(()))
        uniform_init_(self.recon_W, d_context)

    @property
    def fusion_weight(self) -> torch.Tensor:
        return torch.sigmoid(self.fusion_logit)
