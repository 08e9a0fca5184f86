"""Versioned checkpoint container shared by every network.

Layout::

    b"AGDCKPT\\0" | u32 version | u64 header length | JSON header | tensor data

The header holds metadata, an optional schedule descriptor and an index of
named tensors (name, shape, byte offset). Tensor data is float32 little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"AGDCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, metadata: dict | None = None, schedule: dict | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy() if torch.is_tensor(tensors[name])
                                   else tensors[name], dtype="<f4")
        data = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": VERSION, "metadata": metadata or {}, "schedule": schedule,
                         "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict, dict | None]:
    """Returns ``(tensors, metadata, schedule_descriptor)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, header["metadata"], header["schedule"]


def module_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: dict) -> None:
    own = module.state_dict()
    state = {}
    for k, v in own.items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key}")
        state[k] = tensors[key].to(v.dtype).reshape(v.shape)
    module.load_state_dict(state)


def optimizer_tensors(prefix: str, module: torch.nn.Module, optimizer: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Adam moments keyed by parameter name, plus per-parameter step counts."""
    names = {id(p): n for n, p in module.named_parameters()}
    out, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names.get(id(p), f"param{len(steps)}")
            out[f"{prefix}.{n}.exp_avg"] = st["exp_avg"]
            out[f"{prefix}.{n}.exp_avg_sq"] = st["exp_avg_sq"]
            steps[n] = int(st["step"])
    return out, steps


def load_optimizer(prefix: str, module, optimizer, tensors: dict, steps: dict) -> None:
    names = {id(p): n for n, p in module.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            n = names[id(p)]
            if n not in steps:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(steps[n])),
                "exp_avg": tensors[f"{prefix}.{n}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"{prefix}.{n}.exp_avg_sq"].clone(),
            }


def save_network(path, kind: str, net: torch.nn.Module, metadata: dict | None = None) -> None:
    """Single-network checkpoint (classifier, reward model); ``net.config`` rebuilds it."""
    from . import __version__

    meta = {**(metadata or {}), "kind": kind, "net": net.config, "tool_version": __version__}
    save_checkpoint(path, module_tensors("net", net), meta)


def load_network(path, kind: str, cls):
    tensors, meta, _ = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    net = cls(**meta["net"])
    load_module("net", net, tensors)
    net.eval()
    return net, meta
