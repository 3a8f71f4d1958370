"""Temporal IoU, NMS and retrieval metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import EvaluationError

Span = tuple[float, float]


def temporal_iou(x: Sequence[float], y: Sequence[float]) -> float:
    inter = max(0.0, min(x[1], y[1]) - max(x[0], y[0]))
    union = (x[1] - x[0]) + (y[1] - y[0]) - inter
    if union <= 0:
        return 1.0 if tuple(x[:2]) == tuple(y[:2]) else 0.0
    return inter / union


def nms(moments: Iterable[Sequence[float]], threshold: float = 0.55, max_keep: int | None = None) -> list[tuple]:
    """Greedy non-maximum suppression over (start, end, score) triples.

    Highest score first (ties: smaller start, then smaller end); a candidate
    is dropped when its IoU with a kept moment exceeds ``threshold``.
    """
    pending = sorted((tuple(m) for m in moments), key=lambda m: (-m[2], m[0], m[1]))
    kept = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        if max_keep is not None and len(kept) >= max_keep:
            break
        pending = [m for m in pending if temporal_iou(best, m) <= threshold]
    return kept


@dataclass
class Prediction:
    sample_id: str
    ranked_moments: list[tuple[float, float, float]] = field(default_factory=list)


def _gt(ground_truths: Mapping[str, Span], sample_id: str) -> Span:
    try:
        return ground_truths[sample_id]
    except KeyError:
        raise EvaluationError(f"no ground truth for sample {sample_id!r}") from None


def _best_iou(pred: Prediction, gt: Span, n: int) -> float:
    return max((temporal_iou(m, gt) for m in pred.ranked_moments[:n]), default=0.0)


def recall_at(predictions: Sequence[Prediction], ground_truths: Mapping[str, Span], n: int, m: float) -> float:
    """Share of samples with some top-n moment at IoU strictly above m."""
    if not predictions:
        return 0.0
    hits = sum(_best_iou(p, _gt(ground_truths, p.sample_id), n) > m for p in predictions)
    return hits / len(predictions)


def mean_iou(predictions: Sequence[Prediction], ground_truths: Mapping[str, Span]) -> float:
    if not predictions:
        return 0.0
    return sum(_best_iou(p, _gt(ground_truths, p.sample_id), 1) for p in predictions) / len(predictions)


def didemo_candidates(n_segments: int = 6, segment_seconds: float = 5.0) -> list[Span]:
    return [(a * segment_seconds, (b + 1) * segment_seconds)
            for a in range(n_segments) for b in range(a, n_segments)]


def _same_span(x, y, tol=1e-6):
    return abs(x[0] - y[0]) <= tol and abs(x[1] - y[1]) <= tol


def rank_metrics(predictions: Sequence[Prediction], ground_truths: Mapping[str, Span],
                 candidates: Sequence[Span] | None = None, ks=(1, 5)) -> tuple[float, ...]:
    """Rank@k over a fixed candidate set: is the exact ground-truth candidate in the top k?"""
    candidates = didemo_candidates() if candidates is None else candidates
    if not predictions:
        return tuple(0.0 for _ in ks)
    hits = [0] * len(ks)
    for p in predictions:
        gt = _gt(ground_truths, p.sample_id)
        if not any(_same_span(gt, c) for c in candidates):
            raise EvaluationError(f"ground truth {gt} of {p.sample_id!r} is not a candidate moment")
        rank = next((r for r, mom in enumerate(p.ranked_moments) if _same_span(mom, gt)), None)
        for i, k in enumerate(ks):
            hits[i] += rank is not None and rank < k
    return tuple(h / len(predictions) for h in hits)


def grid_to_seconds(cell: tuple[int, int], seconds_per_index: float) -> Span:
    a, b = cell
    return a * seconds_per_index, (b + 1) * seconds_per_index


def seconds_to_nearest_cell(span: Span, cells: Sequence[tuple[int, int]], seconds_per_index: float) -> tuple[int, int]:
    """Valid cell whose time span has the highest IoU with ``span`` (first one on ties)."""
    return max(cells, key=lambda c: temporal_iou(grid_to_seconds(c, seconds_per_index), span))


def compute_metrics(predictions: Sequence[Prediction], ground_truths: Mapping[str, Span],
                    ns=(1, 5), ms=(0.1, 0.3, 0.5, 0.7), rank: bool = False) -> dict[str, float]:
    report = {}
    for n in ns:
        for m in ms:
            report[f"R@{n},IoU={m:g}"] = recall_at(predictions, ground_truths, n, m)
    report["mIoU"] = mean_iou(predictions, ground_truths)
    if rank:
        r1, r5 = rank_metrics(predictions, ground_truths)
        report["Rank@1"] = r1
        report["Rank@5"] = r5
    return report


def format_report(report: Mapping[str, float]) -> str:
    return "".join(f"{k}={v:.4f}\n" for k, v in report.items())


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.rpartition("=")
            out[key] = float(value)
    return out


def write_predictions(path, predictions: Iterable[Prediction], top: int = 5) -> None:
    lines = []
    for p in predictions:
        triples = [f"{s:.6g},{e:.6g},{c:.6f}" for s, e, c in p.ranked_moments[:top]]
        lines.append("\t".join([p.sample_id, *triples]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path) -> list[Prediction]:
    preds = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sid, *triples = line.split("\t")
        preds.append(Prediction(sid, [tuple(float(x) for x in t.split(",")) for t in triples]))
    return preds
