"""Input checks for the estimator API."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_token_sequences(X, vocab_size: int, name: str = "X", allow_empty_rows: bool = False) -> list[list[int]]:
    """Coerce ``X`` to a list of integer token lists and range-check the ids."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        rows = X.tolist()
    else:
        try:
            rows = [list(r) for r in X]
        except TypeError:
            raise ValueError(f"{name} must be a sequence of token sequences") from None
    if not rows:
        raise ValueError(f"{name} is empty")
    out = []
    for i, row in enumerate(rows):
        arr = np.asarray(row)
        if arr.ndim != 1 or (arr.size and not np.issubdtype(arr.dtype, np.integer)):
            if arr.size and np.all(np.asarray(arr, dtype=float) == np.round(np.asarray(arr, dtype=float))):
                arr = arr.astype(np.int64)
            else:
                raise ValueError(f"{name}[{i}] must be a flat sequence of integer token ids")
        if arr.size == 0 and not allow_empty_rows:
            raise ValueError(f"{name}[{i}] is empty")
        if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
            raise ValueError(f"{name}[{i}] has token ids outside [0, {vocab_size})")
        out.append([int(t) for t in arr])
    return out


def check_paired(X: Sequence, y: Sequence) -> None:
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths: {len(X)} vs {len(y)}")


def group_by_length(rows: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(rows):
        groups.setdefault(len(r), []).append(i)
    return groups
