"""Rationale selector head, soft and hard gates, and the three views.

The head scores each tile from the frozen backbone's projected token. A gate
turns the scores into a keep set: either Concrete (Gumbel-sigmoid) weights
``z`` or an exactly ``K``-sparse mask ``m`` with a sigmoid straight-through
surrogate. The keep, drop and full views are then re-forwarded through the
frozen backbone.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from ._validation import stable_order
from .bags import bag_hash
from .engine import Tensor

log = logging.getLogger(__name__)

SOFT = "soft"
STE = "ste"


class SelectorHead:
    """Two-layer MLP ``h -> h/2 -> 1`` producing one logit per tile."""

    def __init__(self, hidden: int, seed: int = 0):
        if hidden < 2:
            raise ValueError("hidden must be >= 2")
        rng = np.random.default_rng(seed)
        mid = hidden // 2
        b1 = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.params = {
            "W1": Tensor(rng.uniform(-b1, b1, (hidden, mid)), requires_grad=True),
            "b1": Tensor(np.zeros((1, mid)), requires_grad=True),
            # zero output layer: every tile starts with the same logit, so the
            # first keep sets carry no bias from the random init
            "W2": Tensor(np.zeros((mid, 1)), requires_grad=True),
            "b2": Tensor(np.zeros((1, 1)), requires_grad=True),
        }

    bias_names = frozenset({"b1", "b2"})

    def __call__(self, tokens) -> Tensor:
        """Logits as an ``(n, 1)`` column."""
        p = self.params
        t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        hidden = E.tanh(E.add(E.matmul(t, p["W1"]), p["b1"]))
        return E.add(E.matmul(hidden, p["W2"]), p["b2"])

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"selector parameter {k!r} does not match a head of width {self.hidden}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()


def score_tiles(head: SelectorHead, tokens) -> np.ndarray:
    """Selector logits as a flat array (no graph)."""
    return head(np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)).data.reshape(-1).copy()


def gate_noise(seed: int, bag_id: str, epoch: int, n: int) -> np.ndarray:
    """Uniform noise on the open interval (0, 1), keyed by (seed, bag, epoch)."""
    rng = np.random.default_rng([seed, bag_hash(bag_id), epoch])
    return rng.integers(1, 2**53, size=n) / float(2**53)


def soft_gate(a, temperature: float, eps) -> Tensor:
    """Concrete relaxation ``sigmoid((a + log eps - log(1 - eps)) / T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps <= 0) or np.any(eps >= 1):
        raise ValueError("gate noise must lie strictly inside (0, 1)")
    a = a if isinstance(a, Tensor) else Tensor(a)
    noise = (np.log(eps) - np.log1p(-eps)).reshape(a.shape)
    return E.sigmoid(E.div(E.add(a, noise), temperature))


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the ``min(k, n)`` largest scores, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k < 1:
        raise ValueError("K must be >= 1")
    m = np.zeros(scores.size)
    m[stable_order(scores)[:k]] = 1.0
    return m


def hard_topk_gate(a, k: int) -> tuple[np.ndarray, Tensor]:
    """Exact top-K mask ``m`` and straight-through gate ``m~``.

    ``m~`` has forward value ``m`` and gradient ``sigmoid'(a)`` per tile.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    n = a.data.size
    if k > n:
        log.debug("K=%d exceeds %d tiles; clamping", k, n)
    m = topk_mask(a.data, k).reshape(a.shape)
    return m, E.straight_through(m, E.sigmoid(a))


@dataclass
class GateOutput:
    logits: Tensor
    mode: str
    soft: Tensor | None = None  # z, shape (n, 1)
    hard: np.ndarray | None = None  # m, shape (n, 1)
    ste: Tensor | None = None  # m~, shape (n, 1)

    @property
    def weights(self) -> Tensor:
        """The differentiable per-tile selection weights (z or m~)."""
        return self.soft if self.mode == SOFT else self.ste

    @property
    def n_selected(self) -> int:
        return int(self.hard.sum()) if self.hard is not None else -1


@dataclass
class GateConfig:
    mode: str = STE
    temperature: float = 0.5
    k: int = 32
    adaptive: tuple[float, int] | None = None  # (alpha, k_min)

    def __post_init__(self):
        if self.mode not in (SOFT, STE):
            raise ValueError(f"gate mode must be {SOFT!r} or {STE!r}, got {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.k < 1:
            raise ValueError("K must be >= 1")

    def budget(self, n_real: int) -> int:
        if self.adaptive is None:
            return self.k
        from .bags import adaptive_k

        return adaptive_k(n_real, *self.adaptive)


def apply_gate(a: Tensor, config: GateConfig, eps=None) -> GateOutput:
    n = a.data.size
    if config.mode == SOFT:
        eps = np.full(n, 0.5) if eps is None else eps
        return GateOutput(a, SOFT, soft=soft_gate(a, config.temperature, eps))
    m, ste = hard_topk_gate(a, config.budget(n))
    return GateOutput(a, STE, hard=m, ste=ste)


@dataclass
class View:
    excluded: np.ndarray
    weights: Tensor | None


@dataclass
class ThreeViews:
    full: View
    keep: View
    drop: View | None  # None when nothing is left to drop


MULTIPLICATIVE = "multiplicative"
EXCLUSION = "exclusion"


def build_views(n_real: int, gate: GateOutput, gating: str = MULTIPLICATIVE) -> ThreeViews:
    """Full, keep and drop views for one bag.

    Soft gates always weight every tile (``z`` and ``1 - z``). For the hard
    gate, ``gating`` picks how the mask reaches the backbone:

    * ``"multiplicative"``: every tile stays in the bag, weighted by ``m~`` or
      ``1 - m~``. Unselected tiles still receive surrogate gradients.
    * ``"exclusion"``: the keep view excludes the complement of ``m`` and the
      drop view excludes ``m``, which matches how SRP reveals tiles.

    The drop view is ``None`` when the gate keeps every tile.
    """
    if gating not in (MULTIPLICATIVE, EXCLUSION):
        raise ValueError(f"unknown gating {gating!r}")
    none = np.zeros(n_real, dtype=bool)
    full = View(none, None)
    if gate.mode == SOFT:
        z = E.reshape(gate.soft, (n_real,))
        return ThreeViews(full, View(none, z), View(none, E.sub(1.0, z)))
    sel = gate.hard.reshape(-1) > 0
    ste = E.reshape(gate.ste, (n_real,))
    if gating == EXCLUSION:
        keep = View(~sel, ste)
        drop = View(sel.copy(), E.sub(1.0, ste))
    else:
        keep = View(none, ste)
        drop = View(none, E.sub(1.0, ste))
    if sel.all():
        log.debug("drop view empty (K >= N); skipping drop losses")
        return ThreeViews(full, keep, None)
    return ThreeViews(full, keep, drop)
