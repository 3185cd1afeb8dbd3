"""Binary checkpoints.

Layout (little-endian)::

    b"MRTC" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | float32 data
    u32 config_len | config (UTF-8 "key = value" lines)

Model parameters are stored under their own names; optimizer moments, when
present, under ``optim.m.<name>`` / ``optim.v.<name>``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .config import model_config_from_pairs, model_config_to_lines
from .data import Vocabulary
from .models import Captioner
from .training import OptimizerState

MAGIC = b"MRTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    out = io.BytesIO()
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def dumps(model: Captioner, vocab: Vocabulary | None = None, state: OptimizerState | None = None,
          extra: dict | None = None) -> bytes:
    tensors = [(k, p.data) for k, p in model.params.items()]
    if state is not None and state.m:
        tensors += [(f"optim.m.{k}", state.m[k]) for k in model.params if k in state.m]
        tensors += [(f"optim.v.{k}", state.v[k]) for k in model.params if k in state.v]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors:
        buf.write(_tensor_bytes(name, arr))
    lines = model_config_to_lines(model.cfg)
    if vocab is not None:
        lines.append("vocab = " + " ".join(vocab.itos))
        lines.append(f"min_count = {vocab.min_count}")
    if state is not None:
        lines.append(f"optim_step = {state.step}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    cfg = "\n".join(lines).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    return buf.getvalue()


def save_checkpoint(model: Captioner, path, vocab: Vocabulary | None = None,
                    state: OptimizerState | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, vocab, state, extra))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes):
    """Parse checkpoint bytes into ``(model, vocab, optimizer_state, config_pairs)``."""
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint of format version {VERSION}")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    (clen,) = r.unpack("<I")
    text = r.take(clen).decode("utf-8")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after config block")
    pairs = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            pairs[k.strip()] = v.strip()
    cfg = model_config_from_pairs(pairs)
    model = Captioner(cfg)
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: stored shape {arrays[name].shape} != config shape {p.shape}")
    unknown = [k for k in arrays if k not in model.params and not k.startswith("optim.")]
    if unknown:
        raise CheckpointError(f"checkpoint has unknown tensor {unknown[0]!r}")
    for name, p in model.params.items():
        p.data = arrays[name].copy()
    vocab = Vocabulary(pairs["vocab"].split(" "), int(pairs.get("min_count", 1))) if "vocab" in pairs else None
    state = None
    if "optim_step" in pairs:
        state = OptimizerState(step=int(pairs["optim_step"]))
        for name in model.params:
            if f"optim.m.{name}" in arrays:
                state.m[name] = arrays[f"optim.m.{name}"].copy()
                state.v[name] = arrays[f"optim.v.{name}"].copy()
    return model, vocab, state, pairs


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
