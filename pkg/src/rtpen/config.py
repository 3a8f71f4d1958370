"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Command-line overrides win over
file values, and the ``RTPEN_SEED`` environment variable wins over both for
the seed.
"""
from __future__ import annotations

import os
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    dataset_profile: str = "synthetic"
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    embeddings: str = ""
    output_dir: str = "runs/rtpen"
    # model; d_v = 0 means "read it from the first feature file"
    d_v: int = 0
    d_q: int = 300
    d_h: int = 512
    n_c: int = 8
    rnn_hidden: int = 256
    conv_channels: int = 512
    conv_kernel: int = 0          # 0: use the profile's kernel
    T: int = 0                    # 0: use the profile's proposal count
    sampling_rule: str = ""       # synthetic profile only; empty keeps the default
    erase_rate: float = 0.2
    erasing_enabled: bool = True
    use_filter: bool = True
    share_branch: bool = True
    # objectives
    lambda_intra: float = 0.1
    lambda_inter: float = 1.0
    lambda_erase: float = 0.1
    lambda_global: float = 0.01
    lambda_gap: float = 0.01
    margin_intra: float = 0.4
    margin_inter: float = 0.6
    negative_sampling: str = "dataset"   # or "batch"
    # optimisation
    learning_rate: float = 1e-4
    weight_decay: float = 1e-7
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    eval_iou_thresholds: str = "0.1,0.3,0.5,0.7"
    eval_batch_size: int = 32

    @property
    def loss_weights(self) -> tuple[float, float, float, float, float]:
        return (self.lambda_intra, self.lambda_inter, self.lambda_erase, self.lambda_global, self.lambda_gap)

    @property
    def iou_thresholds(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.eval_iou_thresholds.split(",") if x.strip())

    def validate(self) -> "TrainConfig":
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError(f"negative loss weight in {self.loss_weights}")
        if self.negative_sampling not in ("dataset", "batch"):
            raise ConfigError(f"negative_sampling must be 'dataset' or 'batch', got {self.negative_sampling!r}")
        if not 0 <= self.erase_rate <= 1:
            raise ConfigError("erase_rate must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _convert(name: str, hint, raw: str):
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return hint(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {hint.__name__}") from None


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


PATH_KEYS = ("train_manifest", "val_manifest", "test_manifest", "embeddings", "output_dir", "out_dir")


def resolve_paths(values: dict[str, str], base_dir: Path) -> dict[str, str]:
    """Make relative path values relative to ``base_dir`` (the config file's folder)."""
    out = dict(values)
    for key in PATH_KEYS:
        if out.get(key) and not Path(out[key]).is_absolute():
            out[key] = str(base_dir / out[key])
    return out


def build_config(cls, values: dict[str, str], strict: bool = True):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, raw in values.items():
        if key not in hints:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        kwargs[key] = _convert(key, hints[key], raw) if isinstance(raw, str) else raw
    return cls(**kwargs)


def load_train_config(path=None, overrides: list[str] | dict | None = None) -> TrainConfig:
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        values = resolve_paths(parse_key_values(path.read_text(encoding="utf-8"), str(path)), path.parent)
    if isinstance(overrides, dict):
        values.update({k: str(v) for k, v in overrides.items()})
    else:
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
    if os.environ.get("RTPEN_SEED"):
        values["seed"] = os.environ["RTPEN_SEED"]
    return build_config(TrainConfig, values).validate()


def config_from_snapshot(snapshot: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in snapshot.items() if k in names})
