"""Core data types, on-disk formats and preprocessing.

Binary layouts (all little-endian):

* feature file: ``b"RTPF"``, ``uint32 n_v``, ``uint32 d_v``, then ``n_v * d_v``
  float32 values in row-major order.
* embedding table: ``b"RTPE"``, ``uint32 vocab_size``, ``uint32 d_q``, then the
  float32 table. The token strings live next to it in a text file with one
  token per line, in row order.

A manifest is a UTF-8 text file with one tab-separated record per line::

    video_id <TAB> relative/feature/path <TAB> query text [<TAB> gt=start,end]

Lines starting with ``#`` are comments, except ``#key=value`` directives
(``profile``, ``split``, ``seconds_per_feature``) that set manifest metadata.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError, EmptyQueryError, FormatError

FEATURE_MAGIC = b"RTPF"
EMBEDDING_MAGIC = b"RTPE"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class SamplingRule:
    """Which cells (a, b) of the 2D map are proposals: ``(b - a) % modulus == remainder``."""

    modulus: int = 1
    remainder: int = 0

    def __post_init__(self):
        if self.modulus < 1 or not 0 <= self.remainder < self.modulus:
            raise ConfigError(f"bad sampling rule mod({self.modulus},{self.remainder})")

    def accepts(self, a: int, b: int) -> bool:
        return a <= b and (b - a) % self.modulus == self.remainder

    @classmethod
    def parse(cls, text: str) -> "SamplingRule":
        text = text.strip().lower()
        if text in ("all_pairs", "all"):
            return cls(1, 0)
        m = re.fullmatch(r"mod\((\d+)(?:,(\d+))?\)(-odd)?", text.replace(" ", ""))
        if not m:
            raise ConfigError(f"unknown sampling rule {text!r}")
        remainder = int(m.group(2) or 0)
        if m.group(3):
            remainder = 1
        return cls(int(m.group(1)), remainder)

    def __str__(self):
        if self.modulus == 1:
            return "all_pairs"
        return f"mod({self.modulus},{self.remainder})"


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    pooling_stride: int
    max_seq: int
    sampling_rule: SamplingRule
    conv_kernel: int
    proposal_count_T: int
    nms_threshold: float = 0.55
    fixed_candidates: bool = False  # didemo: ranking over a fixed candidate set

    def __post_init__(self):
        if self.pooling_stride < 1 or self.max_seq < 1 or self.proposal_count_T < 1:
            raise ConfigError(f"profile {self.name}: non-positive size")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"profile {self.name}: conv kernel must be a positive odd integer")
        if not 0.0 < self.nms_threshold < 1.0:
            raise ConfigError(f"profile {self.name}: nms threshold outside (0, 1)")


PROFILES = {
    "activitycaption": DatasetProfile("activitycaption", 8, 25, SamplingRule(8, 0), 5, 16),
    "charades": DatasetProfile("charades", 4, 20, SamplingRule(2, 1), 3, 32),
    # six precomputed five-second segment features per video
    "didemo": DatasetProfile("didemo", 1, 20, SamplingRule(1, 0), 1, 6, fixed_candidates=True),
    "synthetic": DatasetProfile("synthetic", 1, 20, SamplingRule(1, 0), 3, 16),
}


def get_profile(name: str, **overrides) -> DatasetProfile:
    try:
        profile = PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown dataset profile {name!r}") from None
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides and name != "synthetic":
        raise ConfigError(f"profile {name!r} is fixed; only 'synthetic' takes overrides")
    return replace(profile, **overrides) if overrides else profile


@dataclass
class VideoFeatures:
    video_id: str
    features: np.ndarray
    seconds_per_index: float = 1.0

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DimensionError(f"video {self.video_id}: expected [n_v>=1, d_v>=1], got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise FormatError(f"video {self.video_id}: non-finite feature values")
        if self.seconds_per_index <= 0:
            raise ArgumentError("seconds_per_index must be positive")

    @property
    def n_v(self) -> int:
        return self.features.shape[0]

    @property
    def duration(self) -> float:
        return self.n_v * self.seconds_per_index


@dataclass
class TokenizedQuery:
    query_id: str
    token_ids: list[int]
    embeddings: np.ndarray
    unknown_token_embedding: np.ndarray
    tokens: list[str] = field(default_factory=list)

    @property
    def n_q(self) -> int:
        return len(self.token_ids)


@dataclass
class WeakSample:
    """What training code sees: a video-query pair and nothing else."""

    sample_id: str
    video: VideoFeatures
    query: TokenizedQuery


@dataclass
class Sample:
    sample_id: str
    video: VideoFeatures
    query: TokenizedQuery
    ground_truth_span: tuple[float, float] | None = None

    def __post_init__(self):
        if self.ground_truth_span is not None:
            s, e = self.ground_truth_span
            if not 0 <= s < e:
                raise ArgumentError(f"sample {self.sample_id}: invalid span {self.ground_truth_span}")

    def weak(self) -> WeakSample:
        return WeakSample(self.sample_id, self.video, self.query)


@dataclass
class ManifestEntry:
    video_id: str
    feature_path: Path
    query_text: str
    gt_span: tuple[float, float] | None = None
    line_number: int = 0


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry]
    dataset_profile: DatasetProfile
    seconds_per_feature: float = 1.0
    root: Path = Path(".")


class Vocabulary:
    """Token-to-row map over an embedding table."""

    def __init__(self, tokens: Sequence[str], embeddings: np.ndarray, unknown: np.ndarray | None = None):
        if len(tokens) == 0:
            raise ArgumentError("empty vocabulary")
        if embeddings.shape[0] != len(tokens):
            raise DimensionError(f"{len(tokens)} tokens but {embeddings.shape[0]} embedding rows")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.embeddings = np.asarray(embeddings, dtype=np.float32)
        self.unknown = np.zeros(self.dim, np.float32) if unknown is None else np.asarray(unknown, np.float32)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index


# -- binary formats ---------------------------------------------------------

def _write_table(path, magic: bytes, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim != 2:
        raise DimensionError(f"expected a 2D array, got shape {array.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, array.shape[0], array.shape[1]))
        fh.write(array.tobytes(order="C"))


def _read_table(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    got, rows, cols = _HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: payload holds {len(raw) - _HEADER.size} bytes, header declares {4 * rows * cols}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float32)


def write_video_features(path, features: np.ndarray) -> None:
    _write_table(path, FEATURE_MAGIC, features)


def load_video_features(path, expected_dim: int | None = None, video_id: str | None = None,
                        seconds_per_index: float = 1.0) -> VideoFeatures:
    array = _read_table(path, FEATURE_MAGIC)
    if expected_dim is not None and array.shape[1] != expected_dim:
        raise DimensionError(f"{path}: d_v={array.shape[1]}, expected {expected_dim}")
    return VideoFeatures(video_id or Path(path).stem, array, seconds_per_index)


def write_embedding_table(path, vocab: Vocabulary) -> None:
    path = Path(path)
    _write_table(path, EMBEDDING_MAGIC, vocab.embeddings)
    vocab_path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def vocab_path(table_path) -> Path:
    table_path = Path(table_path)
    return table_path.with_suffix(".vocab.txt")


def load_embedding_table(path) -> Vocabulary:
    table = _read_table(path, EMBEDDING_MAGIC)
    tokens = vocab_path(path).read_text(encoding="utf-8").split("\n")
    tokens = [t for t in tokens if t]
    return Vocabulary(tokens, table)


# -- preprocessing ----------------------------------------------------------

def temporal_pool(features: np.ndarray, stride: int) -> np.ndarray:
    """Average consecutive groups of ``stride`` rows; a short final group is kept as is."""
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    features = np.asarray(features)
    n = features.shape[0]
    if stride == 1:
        return features.copy()
    groups = math.ceil(n / stride)
    out = np.empty((groups,) + features.shape[1:], dtype=features.dtype)
    for k in range(groups):
        out[k] = features[k * stride:min((k + 1) * stride, n)].mean(axis=0)
    return out


def pool_video(video: VideoFeatures, stride: int) -> VideoFeatures:
    return VideoFeatures(video.video_id, temporal_pool(video.features, stride),
                         video.seconds_per_index * stride)


_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def prepare_query(raw_text: str | Sequence[str], vocab: Vocabulary, max_seq: int,
                  query_id: str = "") -> TokenizedQuery:
    """Tokenize, drop out-of-vocabulary tokens and keep the first ``max_seq``.

    Punctuation tokens count toward ``max_seq`` like words. ``raw_text`` may
    also be an already tokenized list.
    """
    if len(vocab) == 0:
        raise ArgumentError("empty vocabulary")
    tokens = tokenize(raw_text) if isinstance(raw_text, str) else [t.lower() for t in raw_text]
    kept = [t for t in tokens if t in vocab][:max_seq]
    if not kept:
        raise EmptyQueryError(f"query {query_id!r} has no in-vocabulary token: {raw_text!r}")
    ids = [vocab.index[t] for t in kept]
    return TokenizedQuery(query_id, ids, vocab.embeddings[ids].copy(), vocab.unknown.copy(), kept)


# -- manifests --------------------------------------------------------------

def _parse_span(field_text: str, where: str) -> tuple[float, float]:
    if not field_text.startswith("gt="):
        raise FormatError(f"{where}: expected 'gt=<start>,<end>', got {field_text!r}")
    try:
        s, e = (float(x) for x in field_text[3:].split(","))
    except ValueError:
        raise FormatError(f"{where}: malformed span {field_text!r}") from None
    if not 0 <= s < e:
        raise FormatError(f"{where}: span must satisfy 0 <= start < end, got {s},{e}")
    return s, e


def load_manifest(path, profile: str | DatasetProfile | None = None, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    meta = {"split": "train", "profile": "synthetic", "seconds_per_feature": "1.0"}
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                m = re.fullmatch(r"#\s*(\w+)\s*=\s*(\S+)\s*", line)
                if m:
                    meta[m.group(1)] = m.group(2)
                continue
            fields = line.split("\t")
            where = f"{path}:{lineno}"
            if len(fields) < 3 or len(fields) > 4:
                raise FormatError(f"{where}: expected 3 or 4 tab-separated fields, got {len(fields)}")
            video_id, rel, text = fields[:3]
            if not video_id:
                raise FormatError(f"{where}: missing video_id")
            if not rel:
                raise FormatError(f"{where}: missing feature path")
            if not text.strip():
                raise FormatError(f"{where}: missing query text")
            span = _parse_span(fields[3], where) if len(fields) == 4 else None
            feature_path = path.parent / rel
            if check_files and not feature_path.exists():
                raise FormatError(f"{where}: feature file {feature_path} not found")
            entries.append(ManifestEntry(video_id, feature_path, text, span, lineno))
    if profile is None:
        profile = meta["profile"]
    if isinstance(profile, str):
        profile = get_profile(profile)
    split = meta["split"]
    if split not in ("train", "val", "test"):
        raise FormatError(f"{path}: unknown split {split!r}")
    return DatasetManifest(split, entries, profile, float(meta["seconds_per_feature"]), path.parent)


def write_manifest(path, entries: Iterable[ManifestEntry], split: str, profile: str,
                   seconds_per_feature: float = 1.0) -> None:
    path = Path(path)
    lines = [f"#split={split}", f"#profile={profile}", f"#seconds_per_feature={seconds_per_feature!r}"]
    for e in entries:
        rel = Path(e.feature_path)
        if rel.is_absolute():
            rel = rel.relative_to(path.parent)
        record = [e.video_id, rel.as_posix(), e.query_text]
        if e.gt_span is not None:
            record.append(f"gt={e.gt_span[0]!r},{e.gt_span[1]!r}")
        lines.append("\t".join(record))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_samples(manifest: DatasetManifest, vocab: Vocabulary, expected_dim: int | None = None) -> list[Sample]:
    """Read, pool and tokenize every manifest entry.

    Feature files shared by several queries are read once.
    """
    profile = manifest.dataset_profile
    cache: dict[Path, VideoFeatures] = {}
    samples = []
    for i, entry in enumerate(manifest.entries):
        video = cache.get(entry.feature_path)
        if video is None:
            raw = load_video_features(entry.feature_path, expected_dim, entry.video_id,
                                      manifest.seconds_per_feature)
            video = cache[entry.feature_path] = pool_video(raw, profile.pooling_stride)
        sample_id = f"{manifest.split}-{i:06d}"
        query = prepare_query(entry.query_text, vocab, profile.max_seq, query_id=sample_id)
        samples.append(Sample(sample_id, video, query, entry.gt_span))
    return samples
