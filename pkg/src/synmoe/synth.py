"""Synthetic token corpus with a planted token-to-cluster allocation.

The vocabulary is split into ``n_clusters`` contiguous, near-equal blocks.
Each sequence walks a cluster-level Markov chain (stay with probability
``markov_stay``, otherwise jump uniformly to another cluster) and emits a
token drawn uniformly from the current cluster's block.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .moe import MoeModel
from .theory import LatentAllocation

CORPUS_FORMAT = "synmoe-corpus-v1"


@dataclass(frozen=True)
class SynthConfig:
    n_clusters: int = 8
    V: int = 64
    seq_len: int = 17
    n_seqs: int = 512
    markov_stay: float = 0.9
    embed_sep: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.n_clusters > self.V:
            raise ValueError(f"n_clusters={self.n_clusters} exceeds vocabulary size V={self.V}")
        if not 0.0 <= self.markov_stay <= 1.0:
            raise ValueError(f"markov_stay must lie in [0, 1], got {self.markov_stay}")
        if self.seq_len < 2 or self.n_seqs < 1:
            raise ValueError("need seq_len >= 2 and n_seqs >= 1")
        if self.embed_sep < 0:
            raise ValueError("embed_sep must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def make_allocation(V: int, n_clusters: int) -> LatentAllocation:
    if n_clusters > V:
        raise ValueError(f"n_clusters={n_clusters} exceeds V={V}")
    blocks = np.array_split(np.arange(V), n_clusters)
    token_cluster = np.empty(V, dtype=np.int64)
    for c, ids in enumerate(blocks):
        token_cluster[ids] = c
    return LatentAllocation(token_cluster, n_clusters)


def _cluster_path(rng: np.random.Generator, n: int, C: int, stay: float) -> np.ndarray:
    path = np.empty(n, dtype=np.int64)
    path[0] = rng.integers(C)
    moves = rng.uniform(size=n) >= stay
    jumps = rng.integers(0, max(C - 1, 1), size=n)
    for t in range(1, n):
        if moves[t] and C > 1:
            j = jumps[t]
            path[t] = j + (j >= path[t - 1])  # uniform over the other clusters
        else:
            path[t] = path[t - 1]
    return path


def generate_corpus(cfg: SynthConfig) -> tuple[np.ndarray, LatentAllocation]:
    """``(sequences (n_seqs, seq_len) uint32, allocation)``; each sequence has its own derived stream."""
    alloc = make_allocation(cfg.V, cfg.n_clusters)
    blocks = [alloc.block(c) for c in range(cfg.n_clusters)]
    seqs = np.empty((cfg.n_seqs, cfg.seq_len), dtype=np.uint32)
    for i in range(cfg.n_seqs):
        rng = nm.make_rng(cfg.seed, 3, i)
        path = _cluster_path(rng, cfg.seq_len, cfg.n_clusters, cfg.markov_stay)
        u = rng.uniform(size=cfg.seq_len)
        for t, c in enumerate(path):
            b = blocks[c]
            seqs[i, t] = b[int(u[t] * len(b))]
    return seqs, alloc


def plant_embeddings(model: MoeModel, allocation: LatentAllocation, embed_sep: float) -> MoeModel:
    """Reset token embeddings to ``center[cluster] + N(0, I)``.

    Centers are ``embed_sep / sqrt(2)`` times orthonormal directions, so any
    two centers are exactly ``embed_sep`` apart (random unit directions are
    used if ``h < n_clusters``).
    """
    V, h = model.embed.shape
    if allocation.token_cluster.shape[0] != V:
        raise ValueError(f"allocation covers {allocation.token_cluster.shape[0]} ids, model vocab is {V}")
    rng = nm.make_rng(model.seed, 4)
    C = allocation.n_clusters
    raw = rng.normal(size=(h, C))
    if h >= C:
        dirs = np.linalg.qr(raw)[0].T
    else:
        dirs = (raw / np.linalg.norm(raw, axis=0)).T
    centers = embed_sep / np.sqrt(2.0) * dirs
    noise = rng.normal(size=(V, h))
    model.embed.data = centers[allocation.token_cluster] + noise
    return model


def linear_probe_accuracy(reps, labels) -> float:
    """Training accuracy of a multinomial linear classifier: a best-linear-router proxy."""
    from sklearn.linear_model import LogisticRegression

    X, y = np.asarray(reps), np.asarray(labels)
    if np.unique(y).size < 2:
        return 1.0
    clf = LogisticRegression(C=1e4, max_iter=2000)
    return float(clf.fit(X, y).score(X, y))


# ---------------------------------------------------------------- corpus file


def save_corpus(path, sequences, allocation: LatentAllocation, cfg: SynthConfig) -> tuple[Path, Path]:
    """Write ``<path>`` (little-endian u32, row-major sequences) and ``<path>.json`` sidecar."""
    path = Path(path)
    seqs = np.ascontiguousarray(sequences, dtype="<u4")
    path.write_bytes(seqs.tobytes())
    side = path.with_name(path.name + ".json")
    meta = {
        "format": CORPUS_FORMAT,
        "n_seqs": int(seqs.shape[0]),
        "seq_len": int(seqs.shape[1]),
        "allocation": allocation.token_cluster.tolist(),
        "n_clusters": allocation.n_clusters,
        "config": cfg.to_dict(),
    }
    side.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return path, side


def load_corpus(path) -> tuple[np.ndarray, LatentAllocation, SynthConfig]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if meta.get("format") != CORPUS_FORMAT:
        raise ValueError(f"unrecognized corpus format {meta.get('format')!r}")
    raw = np.frombuffer(path.read_bytes(), dtype="<u4")
    n, s = meta["n_seqs"], meta["seq_len"]
    if raw.size != n * s:
        raise ValueError(f"corpus body holds {raw.size} ids, sidecar promises {n * s}")
    alloc = LatentAllocation(np.asarray(meta["allocation"], dtype=np.int64), meta["n_clusters"])
    return raw.reshape(n, s).astype(np.uint32), alloc, SynthConfig(**meta["config"])
