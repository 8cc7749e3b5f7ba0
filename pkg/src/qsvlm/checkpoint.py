"""Checkpoint serialization.

A checkpoint file is the magic header ``QSVLM1``, a one-byte format
version, then the torch-serialized payload (parameter arrays, optimizer
state, step counter, config snapshot as INI text, torch RNG state).
"""

import hashlib
import io
from pathlib import Path

import torch

from qsvlm.config import config_to_ini, parse_config
from qsvlm.training import Checkpoint

MAGIC = b"QSVLM1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {
        "model": ckpt.model_state,
        "optimizer": ckpt.optimizer_state,
        "step": ckpt.step,
        "config_ini": config_to_ini(ckpt.config),
        "torch_rng": ckpt.torch_rng,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(MAGIC + bytes([VERSION]) + buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 1 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a qsvlm checkpoint (bad magic)")
    version = data[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {VERSION})"
        )
    try:
        payload = torch.load(io.BytesIO(data[len(MAGIC) + 1:]), weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return Checkpoint(
        model_state=payload["model"],
        optimizer_state=payload["optimizer"],
        step=payload["step"],
        config=parse_config(payload["config_ini"]),
        torch_rng=payload["torch_rng"],
    )


def _feed(hasher, obj) -> None:
    if torch.is_tensor(obj):
        hasher.update(b"T")
        hasher.update(str(obj.dtype).encode())
        hasher.update(str(tuple(obj.shape)).encode())
        hasher.update(obj.detach().cpu().contiguous().numpy().tobytes())
    elif isinstance(obj, dict):
        hasher.update(b"D")
        for key in sorted(obj, key=repr):
            hasher.update(repr(key).encode())
            _feed(hasher, obj[key])
    elif isinstance(obj, (list, tuple)):
        hasher.update(b"L")
        for item in obj:
            _feed(hasher, item)
    else:
        hasher.update(b"V")
        hasher.update(repr(obj).encode())


def checkpoint_hash(ckpt: Checkpoint) -> str:
    """Content hash over parameters, optimizer state, step, and config.

    Canonical (independent of serialization details), so identical training
    runs produce identical hashes.
    """
    hasher = hashlib.sha256()
    _feed(hasher, ckpt.model_state)
    _feed(hasher, ckpt.optimizer_state)
    _feed(hasher, ckpt.step)
    _feed(hasher, config_to_ini(ckpt.config))
    return hasher.hexdigest()
