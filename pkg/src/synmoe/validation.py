"""Input checks shared by the estimator façade and the CLI."""

from __future__ import annotations

import numpy as np


def check_token_array(X, V: int | None = None, min_len: int = 1) -> np.ndarray:
    """Validate a batch of token sequences and return it as ``int64 (n_seqs, seq_len)``.

    A 1-D input is treated as a single sequence.
    """
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array of token ids, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty token array")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(np.isfinite(arr)) and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise TypeError(f"token ids must be integers, got {arr.dtype}")
    if arr.shape[1] < min_len:
        raise ValueError(f"sequences must hold at least {min_len} tokens")
    if arr.min() < 0:
        raise ValueError("token ids must be non-negative")
    if V is not None and arr.max() >= V:
        raise ValueError(f"token id {int(arr.max())} outside vocabulary of size {V}")
    return arr.astype(np.int64, copy=False)
