"""Synthetic weakly-supervised grounding data with planted target moments.

Every query names a few "concept" words. The matching video is Gaussian noise
plus, inside the target span, a fixed random linear map of the summed concept
embeddings. The map is shared by the whole dataset, so a model has to learn a
real cross-modal correspondence. Filler words come from a disjoint part of the
vocabulary and carry no visual signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (ManifestEntry, SamplingRule, Vocabulary, write_embedding_table, write_manifest,
                   write_video_features)
from .errors import ConfigError
from .evaluation import grid_to_seconds, temporal_iou
from .proposal_branch import CandidateGrid, build_candidate_grid

SPLITS = ("train", "val", "test")


@dataclass
class SyntheticConfig:
    num_train: int = 2000
    num_val: int = 200
    num_test: int = 500
    n_v: int = 32
    d_v: int = 64
    d_q: int = 32
    vocab_size: int = 200
    num_concepts: int = 100
    concepts_per_query: tuple[int, int] = (2, 4)
    filler_tokens: tuple[int, int] = (2, 6)
    span_length_fraction: tuple[float, float] = (0.15, 0.5)
    signal_to_noise: float = 1.0
    seconds_per_index: float = 1.0
    sampling_rule: str = "all_pairs"
    seed: int = 0

    def __post_init__(self):
        for name in ("concepts_per_query", "filler_tokens", "span_length_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        lo, hi = self.span_length_fraction
        if not 0 < lo <= hi < 1:
            raise ConfigError("span_length_fraction must lie in (0, 1)")
        if not 0 < self.num_concepts < self.vocab_size:
            raise ConfigError("need 0 < num_concepts < vocab_size so fillers exist")
        if self.concepts_per_query[1] > self.num_concepts:
            raise ConfigError("more concepts per query than concepts")
        if self.signal_to_noise < 0:
            raise ConfigError("signal_to_noise must be non-negative")
        build_candidate_grid(self.n_v, SamplingRule.parse(self.sampling_rule))

    def split_size(self, split: str) -> int:
        return {"train": self.num_train, "val": self.num_val, "test": self.num_test}[split]


def token_name(i: int) -> str:
    return f"w{i:04d}"


@dataclass
class World:
    """Dataset-wide random quantities: the vocabulary and the concept-to-video map."""

    embeddings: np.ndarray   # [vocab, d_q]
    projection: np.ndarray   # [d_v, d_q]

    @classmethod
    def create(cls, cfg: SyntheticConfig) -> "World":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        emb = rng.standard_normal((cfg.vocab_size, cfg.d_q))
        proj = rng.standard_normal((cfg.d_v, cfg.d_q)) / math.sqrt(cfg.d_q)
        return cls(emb.astype(np.float32), proj.astype(np.float32))

    def vocabulary(self) -> Vocabulary:
        return Vocabulary([token_name(i) for i in range(len(self.embeddings))], self.embeddings)

    def signal(self, concepts: Sequence[int]) -> np.ndarray:
        return self.projection @ self.embeddings[list(concepts)].sum(axis=0)


def plant_video(rng: np.random.Generator, n_v: int, d_v: int, span: tuple[int, int],
                signal: np.ndarray, signal_to_noise: float) -> np.ndarray:
    """Unit-variance noise with ``signal_to_noise * signal`` added to rows [start, end)."""
    video = rng.standard_normal((n_v, d_v))
    video[span[0]:span[1]] += signal_to_noise * signal
    return video.astype(np.float32)


@dataclass
class SyntheticRecord:
    video_id: str
    tokens: list[int]
    concepts: list[int]
    span_indices: tuple[int, int]     # [start, end) in frames
    features: np.ndarray


def generate_split(cfg: SyntheticConfig, world: World, split: str) -> list[SyntheticRecord]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1 + SPLITS.index(split)]))
    records = []
    for i in range(cfg.split_size(split)):
        k = int(rng.integers(cfg.concepts_per_query[0], cfg.concepts_per_query[1] + 1))
        concepts = sorted(rng.choice(cfg.num_concepts, size=k, replace=False).tolist())
        f = int(rng.integers(cfg.filler_tokens[0], cfg.filler_tokens[1] + 1))
        fillers = rng.integers(cfg.num_concepts, cfg.vocab_size, size=f).tolist()
        tokens = [int(t) for t in rng.permutation(np.array(concepts + fillers, dtype=np.int64))]
        frac = rng.uniform(*cfg.span_length_fraction)
        length = min(cfg.n_v, max(1, int(round(frac * cfg.n_v))))
        start = int(rng.integers(0, cfg.n_v - length + 1))
        span = (start, start + length)
        video = plant_video(rng, cfg.n_v, cfg.d_v, span, world.signal(concepts), cfg.signal_to_noise)
        records.append(SyntheticRecord(f"{split}{i:05d}", tokens, concepts, span, video))
    return records


def generate_dataset(cfg: SyntheticConfig, out_dir) -> dict[str, Path]:
    """Write feature files, one manifest per split and the embedding table.

    Returns the manifest paths by split plus ``"embeddings"``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = World.create(cfg)
    paths = {}
    for split in SPLITS:
        if cfg.split_size(split) == 0:
            continue
        feat_dir = out_dir / split
        feat_dir.mkdir(exist_ok=True)
        entries = []
        for rec in generate_split(cfg, world, split):
            fpath = feat_dir / f"{rec.video_id}.rtpf"
            write_video_features(fpath, rec.features)
            text = " ".join(token_name(t) for t in rec.tokens)
            span = tuple(x * cfg.seconds_per_index for x in rec.span_indices)
            entries.append(ManifestEntry(rec.video_id, fpath, text, span))
        paths[split] = out_dir / f"{split}.tsv"
        write_manifest(paths[split], entries, split, "synthetic", cfg.seconds_per_index)
    paths["embeddings"] = out_dir / "embeddings.rtpe"
    write_embedding_table(paths["embeddings"], world.vocabulary())
    return paths


def synthetic_config_from_dict(values: dict) -> SyntheticConfig:
    known = {f.name: f for f in fields(SyntheticConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            continue
        default = getattr(SyntheticConfig, key)
        if isinstance(default, tuple):
            parts = [p for p in str(raw).replace("(", "").replace(")", "").split(",") if p.strip()]
            kwargs[key] = tuple(type(default[0])(p) for p in parts)
        elif isinstance(raw, str):
            kwargs[key] = type(default)(raw)
        else:
            kwargs[key] = raw
    return SyntheticConfig(**kwargs)


@dataclass
class BaselineEstimate:
    value: float
    stderr: float
    trials: int


def random_baseline(grid: CandidateGrid, gt_spans: Sequence[tuple[float, float]], m: float,
                    trials: int = 100_000, seed: int = 0, seconds_per_index: float = 1.0) -> BaselineEstimate:
    """Monte-Carlo R@1 at IoU > m of a predictor that picks a uniform random valid cell.

    Each trial draws a ground-truth span uniformly from ``gt_spans``.
    """
    if trials < 1 or not gt_spans:
        raise ValueError("need at least one trial and one ground-truth span")
    rng = np.random.default_rng(seed)
    cell_ids = rng.integers(0, len(grid), size=trials)
    gt_ids = rng.integers(0, len(gt_spans), size=trials)
    spans = [grid_to_seconds(c, seconds_per_index) for c in grid.valid_cells]
    # IoU table over (gt, cell) pairs; the draws index into it
    table = np.array([[temporal_iou(s, g) for s in spans] for g in gt_spans])
    hits = table[gt_ids, cell_ids] > m
    p = float(hits.mean())
    return BaselineEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / trials), trials)
