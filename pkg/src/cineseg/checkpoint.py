"""Self-describing checkpoint container.

Layout: magic "CKPT1" | u32 header length | UTF-8 JSON header | raw payload.
The header carries the model config, the freeze partition, the training config
(as a plain dict), epoch, metric history, and a tensor directory mapping each
parameter or optimizer buffer to shape, dtype, and payload offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ParameterPartition, SegmentationNetwork

MAGIC = b"CKPT1"
_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    partition: ParameterPartition
    epoch: int
    train_config: dict
    history: list[dict]
    params: dict[str, np.ndarray]
    optimizer: dict | None = None  # {"step": int, "tensors": {name: {buf: array}}}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    tensors = []
    payload = bytearray()

    def add(name: str, array: np.ndarray) -> None:
        arr = np.ascontiguousarray(array)
        code = {np.float32: "f4", np.float64: "f8"}[arr.dtype.type]
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": len(payload)}
        )
        payload.extend(arr.astype(_DTYPES[code]).tobytes())

    for name in sorted(ckpt.params):
        add(f"param/{name}", ckpt.params[name])
    optimizer_step = None
    if ckpt.optimizer is not None:
        optimizer_step = ckpt.optimizer["step"]
        for pname in sorted(ckpt.optimizer["tensors"]):
            for buf, arr in sorted(ckpt.optimizer["tensors"][pname].items()):
                if arr is not None:
                    add(f"opt/{pname}/{buf}", arr)

    header = {
        "version": 1,
        "model_config": ckpt.model_config.to_dict(),
        "partition": {
            "frozen": list(ckpt.partition.frozen),
            "trainable": list(ckpt.partition.trainable),
        },
        "epoch": ckpt.epoch,
        "train_config": ckpt.train_config,
        "history": ckpt.history,
        "optimizer_step": optimizer_step,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:5]!r}")
    (header_len,) = struct.unpack_from("<I", blob, 5)
    start = 5 + 4
    if len(blob) < start + header_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    header = json.loads(blob[start : start + header_len].decode("utf-8"))
    if header.get("version") != 1:
        raise CheckpointFormatError(f"{path}: unsupported version {header.get('version')}")
    base = start + header_len

    arrays: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        dtype = np.dtype(_DTYPES[rec["dtype"]])
        count = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        offset = base + rec["offset"]
        if offset + count * dtype.itemsize > len(blob):
            raise CheckpointFormatError(f"{path}: truncated payload for tensor {rec['name']}")
        arrays[rec["name"]] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(
            rec["shape"]
        ).copy()

    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    optimizer = None
    if header.get("optimizer_step") is not None:
        tensors: dict[str, dict[str, np.ndarray]] = {}
        for key, arr in arrays.items():
            if not key.startswith("opt/"):
                continue
            pname, _, buf = key[len("opt/") :].rpartition("/")
            tensors.setdefault(pname, {})[buf] = arr
        optimizer = {"step": header["optimizer_step"], "tensors": tensors}

    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        partition=ParameterPartition(
            frozen=tuple(header["partition"]["frozen"]),
            trainable=tuple(header["partition"]["trainable"]),
        ),
        epoch=header["epoch"],
        train_config=header["train_config"],
        history=header["history"],
        params=params,
        optimizer=optimizer,
    )


def checkpoint_from_model(
    model: SegmentationNetwork,
    partition: ParameterPartition,
    epoch: int,
    train_config: dict,
    history: list[dict],
    optimizer: dict | None = None,
) -> Checkpoint:
    params = {
        name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()
    }
    return Checkpoint(
        model_config=model.config,
        partition=partition,
        epoch=epoch,
        train_config=train_config,
        history=list(history),
        params=params,
        optimizer=optimizer,
    )


def restore_model(ckpt: Checkpoint) -> tuple[SegmentationNetwork, ParameterPartition]:
    """Rebuild the network from a checkpoint; loaded values replace any init."""
    model = SegmentationNetwork(ckpt.model_config)
    ckpt.partition.validate(model)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in ckpt.params:
                raise CheckpointFormatError(f"checkpoint is missing parameter {name}")
            value = torch.from_numpy(ckpt.params[name])
            if tuple(value.shape) != tuple(param.shape):
                raise CheckpointFormatError(
                    f"parameter {name}: checkpoint shape {tuple(value.shape)} "
                    f"!= model shape {tuple(param.shape)}"
                )
            param.copy_(value)
    frozen = set(ckpt.partition.frozen)
    for name, param in model.named_parameters():
        param.requires_grad_(name not in frozen)
    return model, ckpt.partition
