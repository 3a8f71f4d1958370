"""Training objectives and negative sampling.

The loss functions work on plain floats as well as on (batched) tensors.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, fields
from typing import Sequence

import torch

from .errors import ConfigError, SamplingError

DEFAULT_WEIGHTS = (0.1, 1.0, 0.1, 0.01, 0.01)
DEFAULT_MARGINS = (0.4, 0.6)


def _hinge(x):
    return torch.clamp(x, min=0.0) if isinstance(x, torch.Tensor) else max(0.0, x)


def intra_loss(k_en, k_sp, margin: float = DEFAULT_MARGINS[0]):
    """Enhanced branch must outscore the suppressed branch of the same pair by ``margin``."""
    return _hinge(margin - k_en + k_sp)


def inter_loss(k_en, k_neg_video, k_neg_query, margin: float = DEFAULT_MARGINS[1]):
    """Matched pair must outscore both unmatched pairs by ``margin``; the two hinges are summed."""
    return _hinge(margin - k_en + k_neg_video) + _hinge(margin - k_en + k_neg_query)


def global_reg(scores, mask=None):
    """Mean score over all valid cells. scores [..., M] or a padded map with ``mask``."""
    if mask is None:
        return scores.mean(dim=-1)
    m = mask.to(scores.dtype)
    dims = tuple(range(1, scores.dim()))
    return (scores * m).sum(dims) / m.sum(dims)


def gap_reg(positive_scores):
    """Entropy of the softmax over the selected proposal scores [..., T]."""
    logp = torch.log_softmax(positive_scores, dim=-1)
    return -(logp.exp() * logp).sum(dim=-1)


@dataclass
class LossBundle:
    intra: torch.Tensor
    inter: torch.Tensor
    erase: torch.Tensor
    global_: torch.Tensor
    gap: torch.Tensor
    weights: tuple[float, float, float, float, float]
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        def scalar(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)
        return {f.name.rstrip("_"): scalar(getattr(self, f.name))
                for f in fields(self) if f.name != "weights"}


def total_loss(intra, inter, erase, global_, gap,
               weights: Sequence[float] = DEFAULT_WEIGHTS) -> LossBundle:
    weights = tuple(float(w) for w in weights)
    if len(weights) != 5:
        raise ConfigError(f"expected 5 loss weights, got {len(weights)}")
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise ConfigError(f"loss weights must be finite and non-negative: {weights}")
    parts = (intra, inter, erase, global_, gap)
    total = sum(w * p for w, p in zip(weights, parts))
    return LossBundle(*parts, weights=weights, total=total)


def sample_negatives(dataset: Sequence, current, rng: random.Random):
    """Draw an unmatched video and an unmatched query for ``current``.

    Both come from entries whose video id differs from the current one,
    uniformly and independently.
    """
    vid = current.video.video_id
    eligible = [s for s in dataset if s.video.video_id != vid]
    if not eligible:
        raise SamplingError(f"no entry with a video other than {vid!r}")
    neg_video = eligible[rng.randrange(len(eligible))].video
    neg_query = eligible[rng.randrange(len(eligible))].query
    return neg_video, neg_query


class NegativeSampler:
    """Dataset-level negative sampling with an index by video id.

    Rejection-samples a uniform entry with a different video id, which is the
    same distribution as :func:`sample_negatives` without the linear scan.
    """

    def __init__(self, dataset: Sequence, rng: random.Random):
        self.dataset = dataset
        self.rng = rng
        self.n_videos = len({s.video.video_id for s in dataset})

    def _draw(self, vid):
        if self.n_videos < 2:
            raise SamplingError("dataset holds a single video; no negatives available")
        while True:
            s = self.dataset[self.rng.randrange(len(self.dataset))]
            if s.video.video_id != vid:
                return s

    def __call__(self, current):
        vid = current.video.video_id
        return self._draw(vid).video, self._draw(vid).query
