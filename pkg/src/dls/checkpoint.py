"""Versioned binary checkpoint container.

Layout::

    b"DLSC"                      magic
    uint32 LE                    format version
    uint32 LE                    header length in bytes
    header                       UTF-8 JSON: format_version, spec, phase, metadata, tensors
    tensor payloads              little-endian, in header order

Each header tensor record carries ``name``, ``dtype`` (``f4``, ``f8`` or
``i8``) and ``shape``. Model parameters are float32 in normal use.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .encoder import Classifier, Encoder, EncoderSpec

MAGIC = b"DLSC"
FORMAT_VERSION = 1
BANK_KEY = "__memory_bank__"
EXTRA_PREFIX = "__extra__/"
_DTYPES = {"f4": (np.dtype("<f4"), torch.float32), "f8": (np.dtype("<f8"), torch.float64), "i8": (np.dtype("<i8"), torch.int64)}
_TORCH_TO_TAG = {v[1]: k for k, v in _DTYPES.items()}

_load_hooks: list[Callable[[str], None]] = []


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: EncoderSpec
    phase: str
    state_dict: dict[str, torch.Tensor]
    bank: torch.Tensor | None = None
    metadata: dict = field(default_factory=dict)
    extra: dict[str, torch.Tensor] = field(default_factory=dict)

    def encoder(self) -> Encoder:
        """Rebuild the encoder. Only valid for checkpoints of an ``Encoder``."""
        enc = Encoder(self.spec)
        dtype = next(iter(self.state_dict.values())).dtype
        enc.to(dtype)
        enc.load_state_dict(self.state_dict)
        return enc


def add_load_hook(fn: Callable[[str], None]) -> None:
    """Call ``fn(path)`` whenever a checkpoint is read."""
    _load_hooks.append(fn)


def remove_load_hook(fn: Callable[[str], None]) -> None:
    _load_hooks.remove(fn)


def save_checkpoint(
    path: str | os.PathLike,
    model: Encoder | Classifier,
    phase: str,
    bank: torch.Tensor | None = None,
    metadata: dict | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
) -> Path:
    """Write ``model`` (and optionally the memory bank and extra tensors such as
    optimizer buffers) to ``path``."""
    tensors = dict(model.state_dict())
    if bank is not None:
        tensors[BANK_KEY] = bank
    for k, v in (extra_tensors or {}).items():
        tensors[EXTRA_PREFIX + k] = v
    records, payloads = [], []
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_TAG:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        tag = _TORCH_TO_TAG[t.dtype]
        records.append({"name": name, "dtype": tag, "shape": list(t.shape)})
        payloads.append(t.numpy().astype(_DTYPES[tag][0], copy=False).tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "phase": phase,
        "metadata": metadata or {},
        "tensors": records,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)
    return path


def load_checkpoint(path: str | os.PathLike, expected_spec: EncoderSpec | None = None) -> Checkpoint:
    """Read a checkpoint, validating magic, version, header fields and payload sizes.

    If ``expected_spec`` is given, every field of the stored spec must match it.
    """
    for hook in list(_load_hooks):
        hook(str(path))
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a DLS checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {version} unsupported (expected {FORMAT_VERSION})"
        )
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header: {exc}") from None
    for key in ("format_version", "spec", "phase", "metadata", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header field {key!r} missing")
    if header["format_version"] != version:
        raise CheckpointError(f"{path}: header field 'format_version' disagrees with preamble")
    try:
        spec = EncoderSpec(**header["spec"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: header field 'spec' invalid: {exc}") from None
    if expected_spec is not None:
        for k, v in expected_spec.to_dict().items():
            if getattr(spec, k) != v:
                raise CheckpointError(
                    f"{path}: spec field {k!r} is {getattr(spec, k)!r}, expected {v!r}"
                )

    offset = 12 + hlen
    tensors = {}
    for rec in header["tensors"]:
        try:
            name, tag, shape = rec["name"], rec["dtype"], tuple(rec["shape"])
            np_dtype, _ = _DTYPES[tag]
        except (KeyError, TypeError):
            raise CheckpointError(f"{path}: header field 'tensors' has a malformed record {rec!r}") from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload for tensor {name!r} truncated")
        arr = np.frombuffer(raw, dtype=np_dtype, count=nbytes // np_dtype.itemsize, offset=offset)
        tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    bank = tensors.pop(BANK_KEY, None)
    extra = {k[len(EXTRA_PREFIX):]: tensors.pop(k) for k in list(tensors) if k.startswith(EXTRA_PREFIX)}
    return Checkpoint(spec, header["phase"], tensors, bank, header["metadata"], extra)
