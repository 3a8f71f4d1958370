"""Byte-stable checkpoint files.

Layout: ``b"RTPC"``, a little-endian uint64 header length, a JSON header with
sorted keys, then every tensor's raw little-endian bytes in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"RTPC"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.int32: "<i4"}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None = None
    epoch: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def _flatten_optimizer(state: dict | None, tensors: dict[str, torch.Tensor]) -> dict | None:
    if state is None:
        return None
    meta = {"param_groups": state["param_groups"], "state": {}}
    # sorted so the layout does not depend on dict insertion order
    for pid in sorted(state["state"], key=int):
        entries = state["state"][pid]
        meta["state"][str(pid)] = {}
        for key, value in sorted(entries.items()):
            if isinstance(value, torch.Tensor):
                name = f"optimizer/{pid}/{key}"
                tensors[name] = value
                meta["state"][str(pid)][key] = {"tensor": name}
            else:
                meta["state"][str(pid)][key] = {"value": value}
    return meta


def _unflatten_optimizer(meta: dict | None, tensors: dict[str, torch.Tensor]) -> dict | None:
    if meta is None:
        return None
    state = {}
    for pid, entries in meta["state"].items():
        state[int(pid)] = {k: tensors[v["tensor"]] if "tensor" in v else v["value"] for k, v in entries.items()}
    return {"state": state, "param_groups": meta["param_groups"]}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    optim = _flatten_optimizer(ckpt.optimizer_state, tensors)
    specs, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise FormatError(f"cannot store dtype {t.dtype} of {name}")
        data = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
        specs.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"tensors": specs, "optimizer": optim, "epoch": ckpt.epoch, "seed": ckpt.seed,
              "config": ckpt.config, "metrics": ckpt.metrics}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    tensors = {}
    for spec in header["tensors"]:
        start = base + spec["offset"]
        arr = np.frombuffer(raw[start:start + spec["nbytes"]], dtype=spec["dtype"]).reshape(spec["shape"])
        tensors[spec["name"]] = torch.from_numpy(arr.copy()).to(_TORCH[spec["dtype"]])
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    return Checkpoint(model_state, _unflatten_optimizer(header["optimizer"], tensors),
                      header["epoch"], header["seed"], header["config"], header.get("metrics", {}))
