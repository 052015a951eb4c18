"""Input checks shared by the estimators."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .bags import Bag, Dataset


def check_bags(bags, dim: int | None = None) -> list[Bag]:
    """Coerce a Dataset, a single Bag or an iterable of bags to a validated list."""
    if isinstance(bags, Bag):
        bags = [bags]
    elif isinstance(bags, Dataset):
        bags = list(bags.bags)
    else:
        bags = list(bags)
    if not bags:
        raise ValueError("expected at least one bag")
    for b in bags:
        if not isinstance(b, Bag):
            raise TypeError(f"expected Bag, got {type(b).__name__}")
        if dim is not None and b.dim != dim:
            raise ValueError(f"bag {b.id!r} has {b.dim} features, estimator was fitted with {dim}")
    return bags


def check_mask(mask, n: int) -> np.ndarray:
    """Boolean exclusion flags of length ``n``; at least one tile must stay included."""
    if mask is None:
        return np.zeros(n, dtype=bool)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape[0] != n:
        raise ValueError(f"mask has {m.shape[0]} entries for a bag of {n} tiles")
    if m.all():
        raise ValueError("every tile is excluded; a forward pass needs at least one tile")
    return m


def check_weights(weights, n: int):
    """Per-tile weights in [0, 1]; a Tensor passes through so gradients can flow."""
    from .engine import Tensor

    if weights is None:
        return None
    data = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if data.reshape(-1).shape[0] != n:
        raise ValueError(f"weights have {data.size} entries for a bag of {n} tiles")
    if np.any(data < 0) or np.any(data > 1):
        raise ValueError("weights must lie in [0, 1]")
    return weights


def stable_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties broken by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def labels_of(bags: Iterable[Bag]) -> np.ndarray:
    return np.array([b.label for b in bags], dtype=np.int64)
