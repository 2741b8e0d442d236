"""Input checks shared by the estimator and the attack harness."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .textdata import PAD


def check_sequences(X, vocab_size: int | None = None, max_len: int | None = None) -> list[list[int]]:
    """Coerce ``X`` into a list of non-empty integer id lists.

    Accepts a list of sequences or a 2-D array padded with PAD on the right.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        seqs = [[int(t) for t in row if t != PAD] for row in X]
    else:
        try:
            seqs = [[int(t) for t in s] for s in X]
        except TypeError:
            raise TypeError("X must be a sequence of token-id sequences") from None
    if not seqs:
        raise ValueError("X is empty")
    for i, s in enumerate(seqs):
        if not s:
            raise ValueError(f"sequence {i} is empty")
        if PAD in s:
            raise ValueError(f"sequence {i} contains PAD inside its body")
        if min(s) < 0:
            raise ValueError(f"sequence {i} has a negative token id")
        if vocab_size is not None and max(s) >= vocab_size:
            raise ValueError(f"sequence {i} has token id {max(s)} >= vocab_size={vocab_size}")
        if max_len is not None and len(s) > max_len:
            raise ValueError(f"sequence {i} has length {len(s)} > max_len={max_len}")
    return seqs


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be 0-based class ids")
    return y.astype(np.int64)


def check_positions(positions: Sequence[int], length: int) -> list[int]:
    out = sorted({int(p) for p in positions})
    if out and (out[0] < 0 or out[-1] >= length):
        raise IndexError(f"positions {out} out of range for length {length}")
    return out
