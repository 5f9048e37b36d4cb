"""Routing traces and their binary file format.

Layout (all little-endian)::

    header   magic  4s   b"MOET"
             version u32 (currently 1)
             B       u32 tokens per step
             L       u32 MoE layers
             E       u32 experts per layer
             k       u32 active experts per token
    records  for step in 0..S-1, for layer in 0..L-1, for token in 0..B-1:
             token_id u32
             active   k x u16   expert ids, highest selection logit first
             scores   E x f32   full softmax routing scores

The number of steps ``S`` follows from the file size. Step index is the
record order. A "step" is one routed batch; traces written by the trainer
use one step per evaluation sequence, so steps double as sequence ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MOET"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class TraceFormatError(ValueError):
    pass


def _record_dtype(k: int, E: int) -> np.dtype:
    return np.dtype([("token", "<u4"), ("active", "<u2", (k,)), ("scores", "<f4", (E,))])


@dataclass
class RoutingTrace:
    """Per-step, per-layer, per-token routing record.

    Shapes: ``tokens (S, B)``, ``active (S, L, B, k)``, ``scores (S, L, B, E)``.
    Scores are held as float32, the on-disk precision, so a file round trip
    is lossless.
    """

    tokens: np.ndarray
    active: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.uint32)
        self.active = np.asarray(self.active, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.tokens.ndim != 2 or self.active.ndim != 4 or self.scores.ndim != 4:
            raise ValueError("trace arrays must be tokens (S,B), active (S,L,B,k), scores (S,L,B,E)")
        S, B = self.tokens.shape
        if self.active.shape[:3] != (S, self.active.shape[1], B) or self.scores.shape[:3] != self.active.shape[:3]:
            raise ValueError("inconsistent trace shapes")
        if self.active.size and (self.active.min() < 0 or self.active.max() >= self.E):
            raise ValueError("active expert id out of range")

    @property
    def n_steps(self) -> int:
        return self.tokens.shape[0]

    @property
    def B(self) -> int:
        return self.tokens.shape[1]

    @property
    def L(self) -> int:
        return self.active.shape[1]

    @property
    def k(self) -> int:
        return self.active.shape[3]

    @property
    def E(self) -> int:
        return self.scores.shape[3]

    @property
    def top1(self) -> np.ndarray:
        """(S, L, B) first active expert of every token."""
        return self.active[..., 0]

    def layer_top1(self, layer: int) -> np.ndarray:
        """Top-1 experts at ``layer`` flattened over steps and tokens."""
        return self.top1[:, layer, :].reshape(-1)

    @classmethod
    def from_layer_outputs(cls, layer_outputs: Sequence, tokens, step: int = 0) -> "RoutingTrace":
        tokens = np.asarray(tokens).reshape(1, -1)
        active = np.stack([o.active for o in layer_outputs])[None]
        scores = np.stack([o.scores.data for o in layer_outputs])[None]
        return cls(tokens, active, scores)

    @classmethod
    def concat(cls, traces: Sequence["RoutingTrace"]) -> "RoutingTrace":
        if not traces:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([t.tokens for t in traces]),
            np.concatenate([t.active for t in traces]),
            np.concatenate([t.scores for t in traces]),
        )

    def same_config(self, other: "RoutingTrace") -> bool:
        return (self.B, self.L, self.E, self.k) == (other.B, other.L, other.E, other.k)

    # ------------------------------------------------------------ file io

    def to_bytes(self) -> bytes:
        S, L, B, k, E = self.n_steps, self.L, self.B, self.k, self.E
        rec = np.empty((S, L, B), dtype=_record_dtype(k, E))
        rec["token"] = np.broadcast_to(self.tokens[:, None, :], (S, L, B))
        rec["active"] = self.active.astype("<u2")
        rec["scores"] = self.scores
        return _HEADER.pack(MAGIC, VERSION, B, L, E, k) + rec.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RoutingTrace":
        if len(blob) < _HEADER.size:
            raise TraceFormatError("truncated trace header")
        magic, version, B, L, E, k = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise TraceFormatError(f"unsupported trace version {version}")
        dt = _record_dtype(k, E)
        body = blob[_HEADER.size :]
        per_step = dt.itemsize * L * B
        if per_step == 0 or len(body) % per_step:
            raise TraceFormatError(f"trace body of {len(body)} bytes is not a whole number of steps")
        rec = np.frombuffer(body, dtype=dt).reshape(-1, L, B)
        tokens = rec["token"][:, 0, :]
        if not (rec["token"] == tokens[:, None, :]).all():
            raise TraceFormatError("token ids disagree across layers")
        return cls(tokens.copy(), rec["active"].astype(np.int64), rec["scores"].copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RoutingTrace":
        return cls.from_bytes(Path(path).read_bytes())
