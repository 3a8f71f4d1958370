"""The full two-branch network with erasing, batched over variable-length samples."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import DatasetProfile, TokenizedQuery, VideoFeatures
from .erasing import (EraseParams, apply_erasure, erase_mask, fuse_proposal_scores,
                      reconstruction_loss, word_dominance, word_to_frame_attention)
from .objectives import gap_reg
from .proposal_branch import (CandidateGrid, ProposalBranch, ProposalSet, batch_cell_mask,
                              build_candidate_grid, select_center_based, valid_scores)
from .visual_filter import FilterOutput, LanguageAwareFilter


@dataclass
class ModelConfig:
    d_v: int
    d_q: int
    d_h: int = 512
    n_c: int = 8
    rnn_hidden: int = 256
    conv_channels: int = 512
    conv_kernel: int = 3
    T: int = 16
    erase_rate: float = 0.2
    erasing_enabled: bool = True
    use_filter: bool = True
    share_branch: bool = True


@dataclass
class Batch:
    v: torch.Tensor         # [B, n, d_v]
    v_mask: torch.Tensor    # [B, n] bool
    q: torch.Tensor         # [B, L, d_q]
    q_mask: torch.Tensor    # [B, L] bool
    grids: list[CandidateGrid]
    cell_mask: torch.Tensor  # [B, n, n] bool

    def __len__(self):
        return self.v.shape[0]

    def rows(self, sl: slice) -> "Batch":
        return Batch(self.v[sl], self.v_mask[sl], self.q[sl], self.q_mask[sl],
                     self.grids[sl], self.cell_mask[sl])


def collate(videos: Sequence[VideoFeatures], queries: Sequence[TokenizedQuery],
            profile: DatasetProfile, dtype=torch.float32) -> Batch:
    n = max(v.n_v for v in videos)
    L = max(q.n_q for q in queries)
    B = len(videos)
    d_v = videos[0].features.shape[1]
    d_q = queries[0].embeddings.shape[1]
    v = np.zeros((B, n, d_v), np.float32)
    q = np.zeros((B, L, d_q), np.float32)
    vm = np.zeros((B, n), bool)
    qm = np.zeros((B, L), bool)
    for i, (vid, qry) in enumerate(zip(videos, queries)):
        v[i, :vid.n_v] = vid.features
        vm[i, :vid.n_v] = True
        q[i, :qry.n_q] = qry.embeddings
        qm[i, :qry.n_q] = True
    grids = [build_candidate_grid(vid.n_v, profile) for vid in videos]
    return Batch(torch.from_numpy(v).to(dtype), torch.from_numpy(vm), torch.from_numpy(q).to(dtype),
                 torch.from_numpy(qm), grids, batch_cell_mask(grids, n))


@dataclass
class EnhancedResult:
    filter_out: FilterOutput | None
    primary_map: torch.Tensor           # c^en          [B, n, n]
    fused_map: torch.Tensor             # c^{en^f}      [B, n, n]
    attention_logits: torch.Tensor      # delta         [B, n, L]
    attention_weights: torch.Tensor     # softmax over words
    erased: torch.Tensor | None         # bool [B, L]
    erased_attention: torch.Tensor | None   # softmax over frames of delta*
    erase_loss: torch.Tensor            # [B]
    proposals: list[ProposalSet]
    k: torch.Tensor                     # [B] sum of fused scores over selected proposals
    global_: torch.Tensor               # [B]
    gap: torch.Tensor                   # [B]
    cell_scores: list[torch.Tensor]     # fused scores per sample, grid order


@dataclass
class SuppressedResult:
    score_map: torch.Tensor
    proposals: list[ProposalSet]
    k: torch.Tensor


class RTPEN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.filter = LanguageAwareFilter(cfg.d_v, cfg.d_q, cfg.d_h, cfg.n_c)
        self.branch = ProposalBranch(cfg.d_v, cfg.d_q, cfg.d_h, cfg.rnn_hidden,
                                     cfg.conv_channels, cfg.conv_kernel)
        # the ablation without sharing gets an independent copy; otherwise the
        # suppressed pass uses self.branch itself
        self.suppressed_branch = None if cfg.share_branch else copy.deepcopy(self.branch)
        self.erase = EraseParams(cfg.d_q, self.branch.d_m)
        self.unknown_embedding = nn.Parameter(torch.randn(cfg.d_q) * 0.01)

    @property
    def sp_branch(self) -> ProposalBranch:
        return self.branch if self.suppressed_branch is None else self.suppressed_branch

    def _filter(self, v, q, b: Batch):
        if not self.cfg.use_filter:
            return None, v
        out = self.filter(v, q, b.v_mask, b.q_mask)
        return out, out.enhanced

    def enhanced(self, b: Batch) -> EnhancedResult:
        cfg = self.cfg
        f_out, v_en = self._filter(b.v, b.q, b)
        primary = self.branch(v_en, b.q, b.cell_mask, b.v_mask, b.q_mask)
        c_en = primary.score_map
        erased = erased_attn = None
        erase_loss = torch.zeros(len(b), dtype=c_en.dtype)
        if cfg.erasing_enabled and cfg.erase_rate > 0:
            dom = word_dominance(primary.attention.logits, b.v_mask)
            erased = erase_mask(dom, cfg.erase_rate, b.q_mask)
            q_star = apply_erasure(b.q, erased, self.unknown_embedding)
            _, v_star = self._filter(v_en, q_star, b)
            second = self.branch(v_star, q_star, b.cell_mask, b.v_mask, b.q_mask)
            context, erased_attn = word_to_frame_attention(second.attention.logits, second.fused, b.v_mask)
            erase_loss = reconstruction_loss(context, b.q, erased, self.erase.recon_W)
            fused = fuse_proposal_scores(c_en, second.score_map, self.erase.fusion_weight)
        else:
            fused = c_en

        proposals, ks, glob, gaps, cells = [], [], [], [], []
        for i, grid in enumerate(b.grids):
            n = grid.n_v
            prim = valid_scores(c_en[i, :n, :n], grid)
            fin = valid_scores(fused[i, :n, :n], grid)
            props = select_center_based(prim.detach().cpu().numpy(), grid, cfg.T)
            chosen = fin[torch.from_numpy(props.positions)]
            proposals.append(props)
            ks.append(chosen.sum())
            glob.append(fin.mean())
            gaps.append(gap_reg(chosen))
            cells.append(fin)
        return EnhancedResult(f_out, c_en, fused, primary.attention.logits, primary.attention.weights,
                              erased, erased_attn, erase_loss, proposals, torch.stack(ks),
                              torch.stack(glob), torch.stack(gaps), cells)

    def suppressed(self, b: Batch, f_out: FilterOutput) -> SuppressedResult:
        out = self.sp_branch(f_out.suppressed, b.q, b.cell_mask, b.v_mask, b.q_mask)
        proposals, ks = [], []
        for i, grid in enumerate(b.grids):
            n = grid.n_v
            scores = valid_scores(out.score_map[i, :n, :n], grid)
            props = select_center_based(scores.detach().cpu().numpy(), grid, self.cfg.T, kind="negative")
            proposals.append(props)
            ks.append(scores[torch.from_numpy(props.positions)].sum())
        return SuppressedResult(out.score_map, proposals, torch.stack(ks))


@dataclass
class RTPENOutput:
    cell_scores: torch.Tensor            # fused, grid order
    proposals_en: ProposalSet
    proposals_sp: ProposalSet | None
    k_en: torch.Tensor
    k_sp: torch.Tensor | None
    erase_loss: torch.Tensor
    global_: torch.Tensor
    gap: torch.Tensor
    grid: CandidateGrid
    enhanced: EnhancedResult


def forward_rtpen(video: VideoFeatures, query: TokenizedQuery, model: RTPEN, profile: DatasetProfile,
                  mode: str = "infer") -> RTPENOutput:
    """Single-pair forward pass; ``train`` mode also runs the suppressed branch."""
    b = collate([video], [query], profile, dtype=next(model.parameters()).dtype)
    en = model.enhanced(b)
    sp = None
    if mode == "train" and model.cfg.use_filter:
        sp = model.suppressed(b, en.filter_out)
    return RTPENOutput(en.cell_scores[0], en.proposals[0], sp.proposals[0] if sp else None,
                       en.k[0], sp.k[0] if sp else None, en.erase_loss[0], en.global_[0], en.gap[0],
                       b.grids[0], en)
