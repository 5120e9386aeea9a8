"""Binary checkpoints with bit-exact float64 payloads.

Layout (all integers unsigned 64-bit little-endian):

    magic "DBPCKPT1" | version | phase len + utf8 | block count |
    per block: name len + utf8 name + rank + dims... + float64 payload |
    config text len + utf8 | rng summary len + utf8

Exactness matters: the parameter-transfer contract compares encoder
outputs bit for bit after a save/load round trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import FormatError

MAGIC = b"DBPCKPT1"
VERSION = 1


@dataclass
class Checkpoint:
    phase: str  # "pretrain" or "finetune"
    blocks: dict  # name -> float64 ndarray
    config_text: str
    rng_summary: str = ""
    version: int = VERSION

    @classmethod
    def from_params(cls, phase: str, groups: dict, config_text: str,
                    rng_summary: str = "") -> "Checkpoint":
        """Flatten named parameter groups into prefixed blocks."""
        blocks = {}
        for prefix, params in groups.items():
            for name, tensor in params.items():
                key = f"{prefix}.{name}"
                if key in blocks:
                    raise FormatError(f"duplicate block name {key!r}")
                blocks[key] = np.array(tensor.data, dtype=np.float64)
        return cls(phase=phase, blocks=blocks, config_text=config_text,
                   rng_summary=rng_summary)

    def group(self, prefix: str) -> dict:
        """Rebuild a parameter group (name -> trainable Tensor)."""
        want = prefix + "."
        out = {name[len(want):]: Tensor(arr.copy(), requires_grad=True)
               for name, arr in self.blocks.items() if name.startswith(want)}
        if not out:
            raise FormatError(f"checkpoint has no blocks with prefix {prefix!r}")
        return out


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        n = self.u64(what + " length")
        return self.take(n, what).decode("utf-8")


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<Q", ckpt.version), _pack_str(ckpt.phase),
           struct.pack("<Q", len(ckpt.blocks))]
    for name, arr in ckpt.blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        out.append(_pack_str(name))
        out.append(struct.pack("<Q", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q" if arr.ndim else "<0Q", *arr.shape))
        out.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    out.append(_pack_str(ckpt.config_text))
    out.append(_pack_str(ckpt.rng_summary))
    return b"".join(out)


def loads_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic bytes: not a checkpoint file")
    version = r.u64("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    phase = r.string("phase tag")
    n_blocks = r.u64("block count")
    blocks = {}
    for _ in range(n_blocks):
        name = r.string("block name")
        rank = r.u64(f"rank of {name!r}")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for block {name!r}")
        dims = [r.u64(f"dim of {name!r}") for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(8 * count, f"payload of {name!r}")
        blocks[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    config_text = r.string("config text")
    rng_summary = r.string("rng summary")
    return Checkpoint(phase=phase, blocks=blocks, config_text=config_text,
                      rng_summary=rng_summary, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
