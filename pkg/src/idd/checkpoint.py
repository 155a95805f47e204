"""Versioned checkpoint container shared by networks and position heads.

Layout, all little-endian::

    magic      4 bytes   b"IDDC"
    version    u32       FORMAT_VERSION
    hdr_len    u32       length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON object:
                           kind        "segnet" | "position_head"
                           spec        constructor arguments for the module
                           init_seed   int
                           iteration   int (optimizer steps taken)
                           tensors     [{"name", "dtype", "shape"}, ...] in payload order
                           extra       free-form JSON (run config, eval history, ...)
    payload    ...       raw tensor bytes, concatenated in ``tensors`` order

Tensor names are ``state_dict`` keys; optimizer momentum buffers, when present,
are stored as ``optim.momentum.<param-name>``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

MAGIC = b"IDDC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


class CheckpointError(ValueError):
    pass


def _to_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(path, kind: str, spec: dict, init_seed: int, iteration: int,
                    tensors: Dict[str, torch.Tensor], extra: Optional[dict] = None) -> None:
    entries, blobs = [], []
    for name, t in tensors.items():
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dtype}")
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape)})
        blobs.append(_to_bytes(t))
    header = json.dumps({"kind": kind, "spec": spec, "init_seed": init_seed, "iteration": iteration,
                         "tensors": entries, "extra": extra or {}}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Return ``{"kind", "spec", "init_seed", "iteration", "extra", "tensors"}``."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hdr_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(data) < start + hdr_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[start:start + hdr_len].decode())
    offset = start + hdr_len
    tensors = {}
    for e in header["tensors"]:
        dtype = _DTYPES[e["dtype"]]
        np_dtype = np.dtype(str(dtype).replace("torch.", "")).newbyteorder("<")
        n = int(np.prod(e["shape"], dtype=np.int64)) * np_dtype.itemsize
        if offset + n > len(data):
            raise CheckpointError(f"{path}: truncated payload at tensor {e['name']!r}")
        arr = np.frombuffer(data, dtype=np_dtype, count=n // np_dtype.itemsize, offset=offset)
        tensors[e["name"]] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="))).reshape(e["shape"])
        offset += n
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    header.pop("tensors")
    header["tensors"] = tensors
    return header


def _momentum_tensors(optimizer, named_params) -> Dict[str, torch.Tensor]:
    out = {}
    if optimizer is None:
        return out
    for name, p in named_params:
        buf = optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[f"optim.momentum.{name}"] = buf
    return out


def restore_momentum(optimizer, named_params, tensors: Dict[str, torch.Tensor]) -> None:
    for name, p in named_params:
        buf = tensors.get(f"optim.momentum.{name}")
        if buf is not None:
            optimizer.state[p]["momentum_buffer"] = buf.clone()


def save_model(path, model, iteration: int = 0, extra: Optional[dict] = None,
               optimizer=None, named_params=None, extra_tensors: Optional[Dict[str, torch.Tensor]] = None) -> None:
    """``extra_tensors`` (e.g. a jointly trained head) ride along under their own names."""
    tensors = dict(model.state_dict())
    if extra_tensors:
        tensors.update(extra_tensors)
    if optimizer is not None:
        tensors.update(_momentum_tensors(optimizer, named_params or model.named_parameters()))
    save_checkpoint(path, "segnet", model.spec.to_dict(), getattr(model, "init_seed", 0),
                    iteration, tensors, extra)


def load_model(path, frozen: bool = True):
    """Rebuild a network from a checkpoint; returns ``(model, checkpoint_dict)``."""
    from .models import ModelSpec, build_model, freeze

    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "segnet":
        raise CheckpointError(f"{path}: holds a {ckpt['kind']!r}, not a segmentation network")
    model = build_model(ModelSpec.from_dict(ckpt["spec"]), ckpt["init_seed"])
    own = set(model.state_dict())
    state = {k: v for k, v in ckpt["tensors"].items() if k in own}
    model.load_state_dict(state)
    if frozen:
        freeze(model)
    return model, ckpt


def save_head(path, head, iteration: int = 0, extra: Optional[dict] = None) -> None:
    save_checkpoint(path, "position_head", {"in_channels": head.in_channels, "hidden": head.hidden},
                    getattr(head, "init_seed", 0), iteration, dict(head.state_dict()), extra)


def load_head(path, frozen: bool = True):
    from .position import build_position_head

    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "position_head":
        raise CheckpointError(f"{path}: holds a {ckpt['kind']!r}, not a position head")
    head = build_position_head(ckpt["spec"]["in_channels"], ckpt["spec"]["hidden"], ckpt["init_seed"])
    head.load_state_dict(ckpt["tensors"])
    if frozen:
        head.eval()
        for p in head.parameters():
            p.requires_grad_(False)
    return head, ckpt
