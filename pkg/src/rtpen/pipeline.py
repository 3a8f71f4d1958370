"""Training loop, inference, evaluation and attention export."""
from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, config_from_snapshot
from .data import (DatasetProfile, Sample, SamplingRule, Vocabulary, WeakSample, get_profile,
                   load_embedding_table, load_manifest, load_samples)
from .errors import ConfigError, DivergenceError, EvaluationError, SamplingError
from .evaluation import Prediction, compute_metrics, grid_to_seconds, nms
from .model import RTPEN, ModelConfig, collate
from .objectives import NegativeSampler, inter_loss, intra_loss, total_loss

log = logging.getLogger(__name__)


def resolve_profile(cfg: TrainConfig) -> DatasetProfile:
    overrides = {}
    if cfg.dataset_profile == "synthetic":
        if cfg.sampling_rule:
            overrides["sampling_rule"] = SamplingRule.parse(cfg.sampling_rule)
        if cfg.conv_kernel:
            overrides["conv_kernel"] = cfg.conv_kernel
        if cfg.T:
            overrides["proposal_count_T"] = cfg.T
    return get_profile(cfg.dataset_profile, **overrides)


def model_config(cfg: TrainConfig, profile: DatasetProfile, d_v: int, d_q: int) -> ModelConfig:
    return ModelConfig(d_v=d_v, d_q=d_q, d_h=cfg.d_h, n_c=cfg.n_c, rnn_hidden=cfg.rnn_hidden,
                       conv_channels=cfg.conv_channels, conv_kernel=cfg.conv_kernel or profile.conv_kernel,
                       T=cfg.T or profile.proposal_count_T, erase_rate=cfg.erase_rate,
                       erasing_enabled=cfg.erasing_enabled, use_filter=cfg.use_filter,
                       share_branch=cfg.share_branch)


def load_split(cfg: TrainConfig, split: str, vocab: Vocabulary, profile: DatasetProfile) -> list[Sample]:
    path = {"train": cfg.train_manifest, "val": cfg.val_manifest, "test": cfg.test_manifest}[split]
    if not path:
        raise ConfigError(f"no manifest configured for split {split!r}")
    manifest = load_manifest(path, profile)
    header = load_manifest(path, check_files=False)
    if header.dataset_profile.name != profile.name:
        raise ConfigError(f"{path} declares profile {header.dataset_profile.name!r}, config uses {profile.name!r}")
    return load_samples(manifest, vocab, cfg.d_v or None)


def build_model(cfg: TrainConfig, profile: DatasetProfile, d_v: int, d_q: int) -> RTPEN:
    torch.manual_seed(cfg.seed)
    return RTPEN(model_config(cfg, profile, d_v, d_q))


def make_optimizer(model: RTPEN, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def _filter_rows(f_out, sl):
    return type(f_out)(*(getattr(f_out, k)[sl] for k in f_out.__dataclass_fields__))


def batch_losses(model: RTPEN, batch: Sequence[WeakSample], negatives, profile: DatasetProfile,
                 cfg: TrainConfig):
    """LossBundle of one batch, averaged over its samples.

    The enhanced path runs once over [positives; (neg video, query); (video, neg query)].
    """
    B = len(batch)
    videos = [s.video for s in batch] + [nv for nv, _ in negatives] + [s.video for s in batch]
    queries = [s.query for s in batch] + [s.query for s in batch] + [nq for _, nq in negatives]
    dtype = next(model.parameters()).dtype
    b = collate(videos, queries, profile, dtype)
    en = model.enhanced(b)
    k_en, k_neg_v, k_neg_q = en.k[:B], en.k[B:2 * B], en.k[2 * B:]
    if model.cfg.use_filter:
        sp = model.suppressed(b.rows(slice(0, B)), _filter_rows(en.filter_out, slice(0, B)))
        intra = intra_loss(k_en, sp.k, cfg.margin_intra).mean()
    else:
        intra = torch.zeros((), dtype=dtype)
    inter = inter_loss(k_en, k_neg_v, k_neg_q, cfg.margin_inter).mean()
    erase = en.erase_loss[:B].mean()
    return total_loss(intra, inter, erase, en.global_[:B].mean(), en.gap[:B].mean(), cfg.loss_weights)


class BatchNegatives:
    """Negatives drawn from the other samples of the same batch."""

    def __init__(self, rng: random.Random):
        self.rng = rng

    def __call__(self, batch):
        out = []
        for s in batch:
            others = [o for o in batch if o.video.video_id != s.video.video_id]
            if not others:
                raise SamplingError("batch holds a single video; use dataset-level negatives")
            out.append((self.rng.choice(others).video, self.rng.choice(others).query))
        return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    best_path: Path | None = None


class Trainer:
    def __init__(self, cfg: TrainConfig, train_samples: Sequence[Sample], val_samples: Sequence[Sample] = (),
                 profile: DatasetProfile | None = None, model: RTPEN | None = None):
        self.cfg = cfg
        self.profile = profile or resolve_profile(cfg)
        # ground-truth spans never reach the optimisation code
        self.train = [s.weak() for s in train_samples]
        self.val = list(val_samples)
        d_v = self.train[0].video.features.shape[1]
        d_q = self.train[0].query.embeddings.shape[1]
        self.model = model or build_model(cfg, self.profile, d_v, d_q)
        self.optimizer = make_optimizer(self.model, cfg)
        self.order_rng = random.Random(cfg.seed)
        neg_rng = random.Random(cfg.seed + 1)
        self.dataset_negatives = NegativeSampler(self.train, neg_rng)
        self.batch_negatives = BatchNegatives(neg_rng)
        self.epoch = 0

    def negatives(self, batch):
        if self.cfg.negative_sampling == "batch":
            return self.batch_negatives(batch)
        return [self.dataset_negatives(s) for s in batch]

    def checkpoint(self, metrics=None) -> Checkpoint:
        return Checkpoint({k: v.detach().clone() for k, v in self.model.state_dict().items()},
                          copy.deepcopy(self.optimizer.state_dict()), self.epoch, self.cfg.seed, self.cfg.to_dict(),
                          metrics or {})

    def step(self, batch) -> dict[str, float]:
        self.model.train()
        bundle = batch_losses(self.model, batch, self.negatives(batch), self.profile, self.cfg)
        if not torch.isfinite(bundle.total):
            raise DivergenceError(f"non-finite loss at epoch {self.epoch}", self.checkpoint())
        self.optimizer.zero_grad()
        bundle.total.backward()
        self.optimizer.step()
        return bundle.as_dict()

    def run_epoch(self) -> dict[str, float]:
        order = list(range(len(self.train)))
        self.order_rng.shuffle(order)
        bs = self.cfg.batch_size
        sums: dict[str, float] = {}
        steps = 0
        for start in range(0, len(order), bs):
            parts = self.step([self.train[i] for i in order[start:start + bs]])
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        self.epoch += 1
        return {k: v / max(steps, 1) for k, v in sums.items()}

    def fit(self, output_dir=None) -> TrainResult:
        out = Path(output_dir) if output_dir else None
        history = []
        best_score, best = -math.inf, None
        for _ in range(self.cfg.epochs):
            try:
                losses = self.run_epoch()
            except DivergenceError as err:
                if out is not None and err.last_good is not None:
                    save_checkpoint(out / "last_good.ckpt", err.last_good)
                raise
            record = {"epoch": self.epoch, **losses}
            if self.val:
                report = evaluate_samples(self.model, self.val, self.profile, self.cfg)
                record["val_R@1,IoU=0.5"] = report["R@1,IoU=0.5"]
            history.append(record)
            log.info("epoch %d: %s", self.epoch, " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
            score = record.get("val_R@1,IoU=0.5", float(self.epoch))
            if score > best_score:
                best_score, best = score, self.checkpoint({"val_R@1,IoU=0.5": record.get("val_R@1,IoU=0.5")})
                if out is not None:
                    save_checkpoint(out / "best.ckpt", best)
        final = self.checkpoint()
        if out is not None:
            save_checkpoint(out / "last.ckpt", final)
        return TrainResult(best or final, history, out / "best.ckpt" if out and best else None)


def train(cfg: TrainConfig) -> TrainResult:
    profile = resolve_profile(cfg)
    vocab = load_embedding_table(cfg.embeddings)
    train_samples = load_split(cfg, "train", vocab, profile)
    val_samples = load_split(cfg, "val", vocab, profile) if cfg.val_manifest else []
    trainer = Trainer(cfg, train_samples, val_samples, profile)
    return trainer.fit(cfg.output_dir)


# -- inference --------------------------------------------------------------

@dataclass
class Ranking:
    sample_id: str
    moments: list[tuple[float, float, float]]     # every valid cell, best first, in seconds


def rank_samples(model: RTPEN, samples: Sequence[Sample], profile: DatasetProfile,
                 batch_size: int = 32) -> list[Ranking]:
    """Rank every valid cell of every sample by the fused enhanced score."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            b = collate([s.video for s in chunk], [s.query for s in chunk], profile, dtype)
            en = model.enhanced(b)
            for s, grid, scores in zip(chunk, b.grids, en.cell_scores):
                sc = scores.cpu().numpy().astype(np.float64)
                order = np.lexsort((np.arange(len(sc)), -sc))
                moments = []
                for p in order:
                    t0, t1 = grid_to_seconds((int(grid.starts[p]), int(grid.ends[p])), s.video.seconds_per_index)
                    moments.append((t0, t1, float(sc[p])))
                out.append(Ranking(s.sample_id, moments))
    return out


def predictions_from_rankings(rankings: Sequence[Ranking], threshold: float, top: int = 5) -> list[Prediction]:
    return [Prediction(r.sample_id, nms(r.moments, threshold, max_keep=top)) for r in rankings]


def evaluate_samples(model: RTPEN, samples: Sequence[Sample], profile: DatasetProfile, cfg: TrainConfig,
                     return_predictions: bool = False):
    labelled = [s for s in samples if s.ground_truth_span is not None]
    if len(labelled) != len(samples):
        raise EvaluationError("every evaluation sample needs a ground-truth span")
    rankings = rank_samples(model, samples, profile, cfg.eval_batch_size)
    preds = predictions_from_rankings(rankings, profile.nms_threshold)
    gts = {s.sample_id: s.ground_truth_span for s in samples}
    report = compute_metrics(preds, gts, ns=(1, 5), ms=cfg.iou_thresholds)
    if profile.fixed_candidates:
        # Rank@k ranks the full candidate list; NMS would drop overlapping candidates
        from .evaluation import rank_metrics
        full = [Prediction(r.sample_id, r.moments) for r in rankings]
        report["Rank@1"], report["Rank@5"] = rank_metrics(full, gts)
    return (report, preds) if return_predictions else report


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[RTPEN, TrainConfig, DatasetProfile]:
    cfg = config_from_snapshot(ckpt.config)
    profile = resolve_profile(cfg)
    d_v = ckpt.model_state["filter.score_W1"].shape[1]
    d_q = ckpt.model_state["filter.centers"].shape[1]
    model = RTPEN(model_config(cfg, profile, d_v, d_q))
    model.load_state_dict(ckpt.model_state)
    return model, cfg, profile


def evaluate(cfg: TrainConfig, checkpoint: Checkpoint | str | Path, split: str = "test",
             return_predictions: bool = False):
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model, ckpt_cfg, profile = model_from_checkpoint(checkpoint)
    if ckpt_cfg.dataset_profile != cfg.dataset_profile:
        raise ConfigError(f"checkpoint was trained on {ckpt_cfg.dataset_profile!r}, "
                          f"config asks for {cfg.dataset_profile!r}")
    vocab = load_embedding_table(cfg.embeddings)
    samples = load_split(cfg, split, vocab, profile)
    return evaluate_samples(model, samples, profile, cfg, return_predictions)


# -- attention export -------------------------------------------------------

def export_attention(checkpoint: Checkpoint | str | Path, sample: Sample, out_path) -> Path:
    """Write the primary (softmax over words) and erased-pass (softmax over frames) attention grids."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model, _, profile = model_from_checkpoint(checkpoint)
    model.eval()
    with torch.no_grad():
        b = collate([sample.video], [sample.query], profile)
        en = model.enhanced(b)
    tokens = sample.query.tokens or [str(t) for t in sample.query.token_ids]
    header = "frame," + ",".join(tokens)

    def grid(mat):
        return [f"{i}," + ",".join(f"{x:.8f}" for x in row) for i, row in enumerate(mat.tolist())]

    lines = ["# primary attention (rows: frames, softmax over words)", header]
    lines += grid(en.attention_weights[0].numpy())
    erased_words = []
    if en.erased_attention is not None:
        lines += ["# erased attention (rows: frames, softmax over frames per word)", header]
        lines += grid(en.erased_attention[0].numpy())
        erased_words = [tokens[i] for i in np.flatnonzero(en.erased[0].numpy())]
    lines += ["# erased words", *erased_words]
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path


def find_sample(cfg: TrainConfig, sample_id: str) -> Sample:
    profile = resolve_profile(cfg)
    vocab = load_embedding_table(cfg.embeddings)
    for split, path in (("test", cfg.test_manifest), ("val", cfg.val_manifest), ("train", cfg.train_manifest)):
        if not path:
            continue
        for s in load_split(cfg, split, vocab, profile):
            if s.sample_id == sample_id or s.video.video_id == sample_id:
                return s
    raise KeyError(f"sample {sample_id!r} not found in any configured split")
