"""Shared proposal branch: cross-modal interaction, 2D moment map, scoring and
center-based proposal selection.

One :class:`ProposalBranch` instance scores both the enhanced and the
suppressed stream; the caller passes the same module object twice.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .data import DatasetProfile, SamplingRule
from .errors import EmptyGridError
from .visual_filter import uniform_init_


# -- candidate grid ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CandidateGrid:
    n_v: int
    rule: SamplingRule
    starts: np.ndarray   # [M] int, lexicographic (a, b) order
    ends: np.ndarray     # [M] int, inclusive

    @property
    def valid_cells(self) -> list[tuple[int, int]]:
        return list(zip(self.starts.tolist(), self.ends.tolist()))

    @functools.cached_property
    def cell_index(self) -> dict[tuple[int, int], int]:
        return {cell: i for i, cell in enumerate(self.valid_cells)}

    def __len__(self):
        return len(self.starts)

    @functools.cached_property
    def flat_index(self) -> np.ndarray:
        """Positions of the valid cells in a flattened [n_v, n_v] map."""
        return self.starts * self.n_v + self.ends

    @functools.cached_property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_v, self.n_v), dtype=bool)
        m[self.starts, self.ends] = True
        return m

    @functools.cached_property
    def iou(self) -> np.ndarray:
        """Pairwise temporal IoU between cells, each covering [a, b + 1)."""
        s = self.starts.astype(np.float64)
        e = self.ends.astype(np.float64) + 1.0
        inter = np.clip(np.minimum(e[:, None], e[None]) - np.maximum(s[:, None], s[None]), 0.0, None)
        union = (e - s)[:, None] + (e - s)[None] - inter
        return inter / union


@functools.lru_cache(maxsize=256)
def _grid(n_v: int, rule: SamplingRule) -> CandidateGrid:
    cells = [(a, b) for a in range(n_v) for b in range(a, n_v) if rule.accepts(a, b)]
    if not cells:
        raise EmptyGridError(f"no valid cell for n_v={n_v} under rule {rule}")
    arr = np.array(cells, dtype=np.int64)
    return CandidateGrid(n_v, rule, arr[:, 0].copy(), arr[:, 1].copy())


def build_candidate_grid(n_v: int, profile: DatasetProfile | SamplingRule) -> CandidateGrid:
    if n_v < 1:
        raise EmptyGridError(f"n_v must be >= 1, got {n_v}")
    rule = profile.sampling_rule if isinstance(profile, DatasetProfile) else profile
    return _grid(int(n_v), rule)


def batch_cell_mask(grids: list[CandidateGrid], n_max: int) -> torch.Tensor:
    """Stack per-sample grid masks into a zero-padded [B, n_max, n_max] bool tensor."""
    out = torch.zeros(len(grids), n_max, n_max, dtype=torch.bool)
    for i, g in enumerate(grids):
        out[i, :g.n_v, :g.n_v] = torch.from_numpy(g.mask)
    return out


# -- branch operations ------------------------------------------------------

class Attention(NamedTuple):
    logits: torch.Tensor    # delta      [..., n_v, n_q]
    weights: torch.Tensor   # softmax over words
    context: torch.Tensor   # s_i        [..., n_v, d_q]


def frame_to_word_attention(v, q, attn_W1, attn_W2, attn_bias, attn_vec, q_mask=None) -> Attention:
    pv = v @ attn_W1.transpose(0, 1)
    pq = q @ attn_W2.transpose(0, 1) + attn_bias
    logits = torch.tanh(pv.unsqueeze(-2) + pq.unsqueeze(-3)) @ attn_vec
    masked = logits
    if q_mask is not None:
        masked = logits.masked_fill(~q_mask.to(torch.bool).unsqueeze(-2), float("-inf"))
    weights = torch.softmax(masked, dim=-1)
    return Attention(logits, weights, weights @ q)


def fuse_sequence(v, s, rnn: nn.GRU, lengths=None):
    """Bidirectional GRU over [v_i ; s_i]; output [B, n_v, 2 * hidden] (or unbatched)."""
    x = torch.cat([v, s], dim=-1)
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if lengths is None or bool((lengths == x.shape[1]).all()):
        out, _ = rnn(x)
    else:
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
    return out.squeeze(0) if unbatched else out


def build_moment_map(m, cell_mask):
    """F[a, b] = sum_{i=a..b} m_i on valid cells, zero elsewhere.

    m: [..., n_v, d_m]; cell_mask: bool [..., n_v, n_v]. Returns [..., n_v, n_v, d_m].
    """
    zero = torch.zeros_like(m[..., :1, :])
    prefix = torch.cat([zero, torch.cumsum(m, dim=-2)], dim=-2)        # [..., n_v + 1, d_m]
    fmap = prefix[..., 1:, :].unsqueeze(-3) - prefix[..., :-1, :].unsqueeze(-2)
    return fmap * cell_mask.unsqueeze(-1).to(fmap.dtype)


def score_moments(fmap, cell_mask, conv1: nn.Conv2d, conv2: nn.Conv2d, score_W, score_bias):
    """Two same-padded 2D convolutions (ReLU between) and a sigmoid read-out.

    Activations are re-masked to the valid cells after each convolution.
    fmap: [B, n, n, d_m] -> scores [B, n, n], zero at invalid cells.
    """
    mask = cell_mask.to(fmap.dtype).unsqueeze(1)                      # [B, 1, n, n]
    h = fmap.permute(0, 3, 1, 2)
    h = torch.relu(conv1(h) * mask)
    h = conv2(h) * mask
    logits = torch.einsum("bchw,c->bhw", h, score_W) + score_bias
    return torch.sigmoid(logits) * mask.squeeze(1)


# -- proposal selection -----------------------------------------------------

@dataclass
class ProposalSet:
    positions: np.ndarray          # indices into grid.valid_cells, center first
    grid: CandidateGrid
    scores: np.ndarray             # scores used for selection, same order
    kind: str = "positive"

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(int(self.grid.starts[p]), int(self.grid.ends[p])) for p in self.positions]

    def __len__(self):
        return len(self.positions)


def select_center_based(scores, grid: CandidateGrid, T: int, kind: str = "positive") -> ProposalSet:
    """Pick the top-scoring cell, then the T - 1 cells overlapping it most.

    ``scores`` is indexed like ``grid.valid_cells``. Ties: the center is the
    lexicographically smallest best cell; neighbours rank by IoU with the
    center, then by score, then lexicographically.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    m = len(grid)
    if scores.shape[0] != m:
        raise ValueError(f"{scores.shape[0]} scores for {m} cells")
    center = int(np.argmax(scores))      # first maximum = lexicographically smallest
    rest = np.delete(np.arange(m), center)
    iou = grid.iou[center, rest]
    order = rest[np.lexsort((rest, -scores[rest], -iou))]
    positions = np.concatenate([[center], order[:max(0, min(T, m) - 1)]]).astype(np.int64)
    return ProposalSet(positions, grid, scores[positions], kind)


# -- module -----------------------------------------------------------------

class BranchOutput(NamedTuple):
    score_map: torch.Tensor     # [B, n, n]
    attention: Attention
    fused: torch.Tensor         # M [B, n, d_m]


class ProposalBranch(nn.Module):
    def __init__(self, d_v: int, d_q: int, d_h: int = 512, rnn_hidden: int = 256,
                 conv_channels: int = 512, kernel_size: int = 3):
        super().__init__()
        self.attn_W1 = nn.Parameter(torch.empty(d_h, d_v))
        self.attn_W2 = nn.Parameter(torch.empty(d_h, d_q))
        self.attn_bias = nn.Parameter(torch.empty(d_h))
        self.attn_vec = nn.Parameter(torch.empty(d_h))
        self.fusion_rnn = nn.GRU(d_v + d_q, rnn_hidden, batch_first=True, bidirectional=True)
        d_m = 2 * rnn_hidden
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(d_m, conv_channels, kernel_size, padding=pad)
        self.conv2 = nn.Conv2d(conv_channels, conv_channels, kernel_size, padding=pad)
        self.score_W = nn.Parameter(torch.empty(conv_channels))
        self.score_bias = nn.Parameter(torch.zeros(()))
        self.reset_parameters()

    @property
    def d_m(self) -> int:
        return 2 * self.fusion_rnn.hidden_size

    def reset_parameters(self):
        d_h, d_v = self.attn_W1.shape
        d_q = self.attn_W2.shape[1]
        uniform_init_(self.attn_W1, d_v)
        uniform_init_(self.attn_W2, d_q)
        uniform_init_(self.attn_bias, d_v + d_q)
        uniform_init_(self.attn_vec, d_h)
        uniform_init_(self.score_W, self.score_W.shape[0])
        nn.init.zeros_(self.score_bias)

    def forward(self, v, q, cell_mask, v_mask=None, q_mask=None) -> BranchOutput:
        attn = frame_to_word_attention(v, q, self.attn_W1, self.attn_W2, self.attn_bias,
                                       self.attn_vec, q_mask)
        lengths = None if v_mask is None else v_mask.sum(dim=-1).long()
        fused = fuse_sequence(v, attn.context, self.fusion_rnn, lengths)
        if v_mask is not None:
            fused = fused * v_mask.unsqueeze(-1).to(fused.dtype)
        fmap = build_moment_map(fused, cell_mask)
        scores = score_moments(fmap, cell_mask, self.conv1, self.conv2, self.score_W, self.score_bias)
        return BranchOutput(scores, attn, fused)


def valid_scores(score_map: torch.Tensor, grid: CandidateGrid) -> torch.Tensor:
    """Scores of one sample's valid cells in grid order: [n, n] (or padded) -> [M]."""
    n = score_map.shape[-1]
    idx = torch.from_numpy(grid.starts * n + grid.ends)
    return score_map.reshape(-1)[idx]


def run_branch(stream, q, branch: ProposalBranch, profile: DatasetProfile, T: int | None = None):
    """Single-sample branch pass: (ProposalSet, scores over valid cells, attention logits)."""
    n_v = stream.shape[0]
    grid = build_candidate_grid(n_v, profile)
    cell_mask = torch.from_numpy(grid.mask).unsqueeze(0)
    out = branch(stream.unsqueeze(0), q.unsqueeze(0), cell_mask)
    scores = valid_scores(out.score_map[0], grid)
    proposals = select_center_based(scores.detach().numpy(), grid, T or profile.proposal_count_T)
    return proposals, scores, out.attention.logits[0]
