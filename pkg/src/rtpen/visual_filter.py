"""Language-aware visual filter.

Word features are soft-assigned to trainable "scene" centers (NetVLAD-style
residual aggregation), every frame is scored against every scene, and the
per-frame best score, min-max normalized over the video, gates the video into
an enhanced and a suppressed stream.

All functions accept arbitrary leading batch dimensions. Optional masks mark
real (1) versus padded (0) frames / words.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericalError


def uniform_init_(tensor: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


def vlad_aggregate(q, centers, assign_weight, assign_bias, q_mask=None):
    """Residual aggregation of word features around scene centers.

    Args:
        q: [..., n_q, d_q] word features.
        centers: [n_c, d_q].
        assign_weight: [n_c, d_q]; assign_bias: [n_c].
        q_mask: optional [..., n_q].

    Returns:
        (u, alpha): scene features [..., n_c, d_q] and soft assignments
        [..., n_q, n_c] (each row sums to one).
    """
    if not torch.isfinite(q).all():
        raise NumericalError("non-finite word features")
    alpha = torch.softmax(q @ assign_weight.transpose(0, 1) + assign_bias, dim=-1)
    weights = alpha if q_mask is None else alpha * q_mask.unsqueeze(-1).to(alpha.dtype)
    # sum_i a_ij (q_i - c_j) = (A^T Q)_j - (sum_i a_ij) c_j
    u = weights.transpose(-1, -2) @ q - weights.sum(dim=-2).unsqueeze(-1) * centers
    return u, alpha


def scene_frame_scores(v, u, score_W1, score_W2, score_bias, score_vec):
    """beta[i, j] = sigmoid(w . tanh(W1 v_i + W2 u_j + b)), shape [..., n_v, n_c]."""
    pv = v @ score_W1.transpose(0, 1)                     # [..., n_v, d_h]
    pu = u @ score_W2.transpose(0, 1) + score_bias        # [..., n_c, d_h]
    hidden = torch.tanh(pv.unsqueeze(-2) + pu.unsqueeze(-3))
    return torch.sigmoid(hidden @ score_vec)


def normalize_scores(beta, v_mask=None):
    """Per-frame max over scenes, then min-max normalization over frames.

    A constant profile (max == min) maps to 0.5 everywhere. Padded frames get 0.
    """
    best = beta.max(dim=-1).values                        # [..., n_v]
    if v_mask is None:
        lo = best.min(dim=-1, keepdim=True).values
        hi = best.max(dim=-1, keepdim=True).values
    else:
        valid = v_mask.to(torch.bool)
        lo = best.masked_fill(~valid, math.inf).min(dim=-1, keepdim=True).values
        hi = best.masked_fill(~valid, -math.inf).max(dim=-1, keepdim=True).values
    span = hi - lo
    degenerate = span <= 0
    safe = torch.where(degenerate, torch.ones_like(span), span)
    out = torch.where(degenerate, torch.full_like(best, 0.5), (best - lo) / safe)
    if v_mask is not None:
        out = out * v_mask.to(out.dtype)
    return out


def gate_streams(v, weights):
    """Returns (enhanced, suppressed) = (w * v, (1 - w) * v) row by row."""
    w = weights.unsqueeze(-1)
    return w * v, (1.0 - w) * v


@dataclass
class FilterOutput:
    scene_features: torch.Tensor      # U   [..., n_c, d_q]
    assignments: torch.Tensor         # alpha [..., n_q, n_c]
    score_matrix: torch.Tensor        # beta  [..., n_v, n_c]
    normalized_scores: torch.Tensor   # beta~ [..., n_v]
    enhanced: torch.Tensor            # [..., n_v, d_v]
    suppressed: torch.Tensor          # [..., n_v, d_v]


class LanguageAwareFilter(nn.Module):
    def __init__(self, d_v: int, d_q: int, d_h: int = 512, n_c: int = 8):
        super().__init__()
        self.centers = nn.Parameter(torch.empty(n_c, d_q))
        self.assign_weight = nn.Parameter(torch.empty(n_c, d_q))
        self.assign_bias = nn.Parameter(torch.empty(n_c))
        self.score_W1 = nn.Parameter(torch.empty(d_h, d_v))
        self.score_W2 = nn.Parameter(torch.empty(d_h, d_q))
        self.score_bias = nn.Parameter(torch.empty(d_h))
        self.score_vec = nn.Parameter(torch.empty(d_h))
        self.reset_parameters()

    def reset_parameters(self):
        d_q = self.centers.shape[1]
        d_h, d_v = self.score_W1.shape
        uniform_init_(self.centers, d_q)
        uniform_init_(self.assign_weight, d_q)
        uniform_init_(self.assign_bias, d_q)
        uniform_init_(self.score_W1, d_v)
        uniform_init_(self.score_W2, d_q)
        uniform_init_(self.score_bias, d_v + d_q)
        uniform_init_(self.score_vec, d_h)

    def forward(self, v, q, v_mask=None, q_mask=None) -> FilterOutput:
        u, alpha = vlad_aggregate(q, self.centers, self.assign_weight, self.assign_bias, q_mask)
        beta = scene_frame_scores(v, u, self.score_W1, self.score_W2, self.score_bias, self.score_vec)
        norm = normalize_scores(beta, v_mask)
        enhanced, suppressed = gate_streams(v, norm)
        return FilterOutput(u, alpha, beta, norm, enhanced, suppressed)
