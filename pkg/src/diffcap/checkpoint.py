"""Self-describing checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic  b"DIFFCKPT"
    8       4     u32    format version (1)
    12      8     u64    header length H in bytes
    20      H     header, UTF-8 JSON with sorted keys
    20+H    ...   tensor data, each tensor C-contiguous little-endian

The header holds ``config``, ``seed``, ``vocabulary``, ``meta`` and
``groups``. ``groups`` maps each of encoder/mdp/projector/decoder/lora to a
list of ``{"name", "dtype", "shape", "offset", "nbytes"}`` entries whose
offsets count from the first byte after the header. See docs/checkpoint.md.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"DIFFCKPT"
VERSION = 1
GROUPS = ("encoder", "mdp", "projector", "decoder", "lora")
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_HEADER_KEYS = ("config", "seed", "vocabulary", "meta", "groups")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    seed: int
    vocabulary: List[str]
    tensors: Dict[str, Dict[str, torch.Tensor]]
    meta: dict = field(default_factory=dict)

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: v for group in self.tensors.values() for k, v in group.items()}


def group_of(name: str) -> str:
    if ".lora_" in name:
        return "lora"
    top = name.split(".", 1)[0]
    if top not in GROUPS:
        raise CheckpointError(f"parameter {name!r} belongs to no known group")
    return top


def save_checkpoint(
    path,
    model: nn.Module,
    config: dict,
    seed: int,
    vocabulary: List[str],
    meta: Optional[dict] = None,
) -> Path:
    path = Path(path)
    groups = {g: [] for g in GROUPS}
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        data = t.detach().cpu().contiguous().numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        groups[group_of(name)].append({
            "name": name,
            "dtype": _DTYPES[t.dtype],
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        blobs.append(data)
        offset += len(data)
    header = {
        "config": config,
        "seed": seed,
        "vocabulary": list(vocabulary),
        "meta": meta or {},
        "groups": groups,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError(f"{path} is truncated")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    if len(raw) < 20 + hlen:
        raise CheckpointError(f"{path} is truncated inside the header")
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise CheckpointError(f"checkpoint header lacks {missing}")
    unknown = sorted(set(header["groups"]) - set(GROUPS))
    if unknown:
        raise CheckpointError(f"unknown parameter groups {unknown}")
    data = memoryview(raw)[20 + hlen:]
    tensors = {}
    for g in GROUPS:
        tensors[g] = {}
        for e in header["groups"].get(g, []):
            if e["dtype"] not in _DTYPES.values():
                raise CheckpointError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
            end = e["offset"] + e["nbytes"]
            if end > len(data):
                raise CheckpointError(f"{path} is truncated at tensor {e['name']}")
            arr = np.frombuffer(data[e["offset"]:end], dtype=np.dtype(e["dtype"]))
            arr = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
            tensors[g][e["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(header["config"], header["seed"], header["vocabulary"], tensors, header["meta"])


def load_into(model: nn.Module, ckpt: Checkpoint) -> None:
    """Copy tensors into ``model``; any missing, extra or reshaped tensor is a mismatch."""
    state = ckpt.state_dict()
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise CheckpointError(f"checkpoint/config mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, t in own.items():
        if tuple(t.shape) != tuple(state[k].shape):
            raise CheckpointError(
                f"checkpoint/config mismatch at {k}: {tuple(state[k].shape)} vs {tuple(t.shape)}"
            )
    model.load_state_dict(state)
