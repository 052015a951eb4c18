"""Sequential reveal evaluation and the related faithfulness metrics.

Every metric here is a pure function of stored curves, so a saved report can
be re-summarized without touching a model. Only :func:`reveal_curve`,
:func:`deletion_curve` and :func:`selected_only_eval` run forward passes.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ._validation import check_bags, stable_order
from .bags import Bag, adaptive_k, bag_hash
from .stats import roc_auc

log = logging.getLogger(__name__)

DEFAULT_KMAX = 256
EQUAL_BUDGET_KMAX = 32
DENSE_UNTIL = 32
DELETION_GRID = (16, 32, 64, 128, 256)
SHI_EPS = 1e-8
KAPPA_SWEEP = (0.7, 0.8, 0.9, 0.95)
RANDOM_STREAM = 0x5EED  # keeps the random control apart from training streams

RANKINGS = ("native", "foci", "random")


# -- schedules and curves ----------------------------------------------------
def reveal_schedule(n_real: int, k_max: int = DEFAULT_KMAX, dense_until: int = DENSE_UNTIL) -> np.ndarray:
    """Reveal counts: every integer up to ``dense_until``, then doublings.

    The last entry is always ``min(k_max, n_real)``.
    """
    if n_real < 1 or k_max < 1:
        raise ValueError("n_real and k_max must be >= 1")
    top = min(k_max, n_real)
    ks = list(range(1, min(dense_until, top) + 1))
    k = dense_until * 2
    while k < top:
        ks.append(k)
        k *= 2
    if ks[-1] != top:
        ks.append(top)
    return np.asarray(ks, dtype=np.int64)


def check_schedule(schedule, n_real: int) -> np.ndarray:
    s = np.asarray(schedule, dtype=np.int64).reshape(-1)
    if s.size == 0:
        raise ValueError("schedule is empty")
    if s[0] < 1 or np.any(np.diff(s) <= 0):
        raise ValueError("schedule must be strictly increasing and start at K >= 1")
    if s[-1] > n_real:
        raise ValueError(f"schedule reaches K={s[-1]} but the bag has {n_real} tiles")
    return s


@dataclass
class KCurve:
    """Class probabilities at each reveal count of one slide.

    ``target`` is the class the curve tracks: the true label, or the full-bag
    prediction for the predicted-class variant.
    """

    slide_id: str
    n_real: int
    schedule: np.ndarray
    probs: np.ndarray  # (m, C)
    ranking: str
    target: int

    @property
    def rho(self) -> np.ndarray:
        return self.schedule / float(self.n_real)

    @property
    def p_target(self) -> np.ndarray:
        return self.probs[:, self.target]

    def prefix(self, m: int) -> "KCurve":
        return KCurve(self.slide_id, self.n_real, self.schedule[:m].copy(), self.probs[:m].copy(), self.ranking, self.target)

    def to_dict(self) -> dict:
        return {
            "id": self.slide_id,
            "n_real": int(self.n_real),
            "ranking": self.ranking,
            "target": int(self.target),
            "schedule": [int(k) for k in self.schedule],
            "probs": [[float(v) for v in row] for row in self.probs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KCurve":
        return cls(
            d["id"],
            int(d["n_real"]),
            np.asarray(d["schedule"], dtype=np.int64),
            np.asarray(d["probs"], dtype=np.float64),
            d["ranking"],
            int(d["target"]),
        )


def reveal_curve(model, bag: Bag, scores, schedule=None, ranking: str = "native", k_max: int = DEFAULT_KMAX) -> KCurve:
    """Reveal tiles in descending score order and record the probabilities.

    At reveal count ``K`` only the top ``K`` tiles (ties by index) are
    included; the rest go through the model's exclusion mask.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size != bag.n_real:
        raise ValueError(f"ranking has {scores.size} scores for a bag of {bag.n_real} tiles")
    sched = reveal_schedule(bag.n_real, k_max) if schedule is None else check_schedule(schedule, bag.n_real)
    order = stable_order(scores)
    rows = []
    for k in sched:
        if k == bag.n_real:
            rows.append(model.forward(bag).probs)
            continue
        excluded = np.ones(bag.n_real, dtype=bool)
        excluded[order[:k]] = False
        rows.append(model.forward(bag, mask=excluded).probs)
    return KCurve(bag.id, bag.n_real, sched, np.vstack(rows), ranking, int(bag.label))


# -- per-slide summaries -------------------------------------------------------
def _check_kappa(kappa: float) -> None:
    if not 0 < kappa < 1:
        raise ValueError("kappa must lie in (0, 1)")


def msk(curve: KCurve, y: int | None, kappa: float) -> int | None:
    """Smallest scheduled K where class ``y`` is the argmax and ``p_y >= kappa``."""
    _check_kappa(kappa)
    y = curve.target if y is None else y
    hits = (np.argmax(curve.probs, axis=1) == y) & (curve.probs[:, y] >= kappa)
    idx = np.flatnonzero(hits)
    return int(curve.schedule[idx[0]]) if idx.size else None


def aukc(curve: KCurve, y: int | None = None) -> float:
    """Trapezoid area under ``p_y`` against reveal fraction, divided by the last fraction."""
    if curve.schedule.size < 2:
        raise ValueError("AUKC needs at least two reveal steps")
    y = curve.target if y is None else y
    rho = curve.rho
    p = curve.probs[:, y]
    area = float(np.sum((p[:-1] + p[1:]) / 2.0 * np.diff(rho)))
    return area / float(rho[-1])


@dataclass
class SrpSlideSummary:
    slide_id: str
    msk: int | None
    reached: bool
    aukc: float

    def to_dict(self) -> dict:
        return {"id": self.slide_id, "msk": self.msk, "reached": self.reached, "aukc": self.aukc}


def summarize(curve: KCurve, kappa: float) -> SrpSlideSummary:
    k = msk(curve, None, kappa)
    return SrpSlideSummary(curve.slide_id, k, k is not None, aukc(curve))


def reach(summaries: Sequence[SrpSlideSummary]) -> float:
    if not summaries:
        raise ValueError("no slides to summarize")
    return sum(s.reached for s in summaries) / len(summaries)


def msk_cond(summaries: Sequence[SrpSlideSummary]) -> float | None:
    """Mean MSK over slides that reach the threshold; ``None`` if none do."""
    vals = [s.msk for s in summaries if s.reached]
    return float(np.mean(vals)) if vals else None


def mean_aukc(summaries: Sequence[SrpSlideSummary]) -> float:
    return float(np.mean([s.aukc for s in summaries]))


# -- headroom ----------------------------------------------------------------
@dataclass
class ShiReport:
    msk_cond_base: float | None
    msk_cond_foci: float | None
    eps: float = SHI_EPS
    shi: float | None = field(default=None)

    def __post_init__(self):
        if self.shi is None and self.msk_cond_base is not None and self.msk_cond_foci is not None:
            self.shi = shi(self.msk_cond_base, self.msk_cond_foci, self.eps)

    @property
    def defined(self) -> bool:
        return self.shi is not None


def shi(base: float | None, foci: float | None, eps: float = SHI_EPS) -> float | None:
    """Relative MSK compression of FOCI over the native ranking.

    Positive values mean the FOCI ranking reaches the threshold with fewer
    tiles. Undefined (``None``) when either conditional mean is missing.
    """
    if base is None or foci is None:
        return None
    return (base - foci) / (base + eps)


# -- deletion ----------------------------------------------------------------
@dataclass
class DeletionCurve:
    slide_id: str
    grid: np.ndarray
    delta: np.ndarray  # p_y(full) - p_y(top-K deleted)
    truncated: bool

    @property
    def auc(self) -> float:
        return deletion_auc(self.delta, self.grid)


def deletion_curve(model, bag: Bag, scores, grid: Sequence[int] = DELETION_GRID) -> DeletionCurve:
    """Drop in true-class probability after deleting the top-K ranked tiles.

    Grid points with ``K >= n_real`` cannot be evaluated (nothing would be
    left) and are dropped from the curve.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = stable_order(scores)
    y = int(bag.label)
    p_full = model.forward(bag).probs[y]
    ks = [k for k in grid if k < bag.n_real]
    if len(ks) < len(grid):
        log.debug("bag %s: deletion grid truncated at %d tiles", bag.id, bag.n_real)
    delta = []
    for k in ks:
        excluded = np.zeros(bag.n_real, dtype=bool)
        excluded[order[:k]] = True
        delta.append(p_full - model.forward(bag, mask=excluded).probs[y])
    return DeletionCurve(bag.id, np.asarray(ks, dtype=np.int64), np.asarray(delta), len(ks) < len(grid))


def deletion_auc(delta, grid: Sequence[int] = DELETION_GRID, k_max: int = DEFAULT_KMAX) -> float:
    """Trapezoid area of the deletion curve between grid points, over ``k_max``.

    No segment is integrated from K = 0. Fewer than two points give 0.
    """
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    g = np.asarray(grid, dtype=np.float64).reshape(-1)[: d.size]
    if d.size < 2:
        return 0.0
    return float(np.sum((d[:-1] + d[1:]) / 2.0 * np.diff(g))) / float(k_max)


# -- rankings ----------------------------------------------------------------
def random_scores(bag: Bag, seed: int) -> np.ndarray:
    """Uniform scores from a stream keyed by (seed, slide) only."""
    rng = np.random.default_rng([RANDOM_STREAM, seed, bag_hash(bag.id)])
    return rng.random(bag.n_real)


def oracle_scores(bag: Bag, evidence: Iterable[int]) -> np.ndarray:
    """Planted evidence first (score 1), everything else 0."""
    s = np.zeros(bag.n_real)
    s[np.asarray(list(evidence), dtype=np.int64)] = 1.0
    return s


def ranking_fn(source: str, model=None, selector=None, seed: int = 0) -> Callable[[Bag], np.ndarray]:
    """Map a ranking tag to a function producing per-tile scores."""
    if source == "native":
        if model is None:
            raise ValueError("native ranking needs the backbone")
        return model.native_ranking
    if source == "foci":
        if selector is None:
            raise ValueError("foci ranking needs a trained selector")
        return selector.score_tiles
    if source == "random":
        return lambda bag: random_scores(bag, seed)
    raise ValueError(f"unknown ranking {source!r}; choose from {RANKINGS}")


def _threads() -> int:
    raw = os.environ.get("FOCI_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FOCI_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def map_bags(fn, bags: Sequence[Bag]) -> list:
    """Apply ``fn`` to each bag, in parallel up to ``FOCI_THREADS``; results keep bag order."""
    n = _threads()
    if n == 1 or len(bags) < 2:
        return [fn(b) for b in bags]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, bags))


def srp_curves(model, bags, score_fn, ranking: str, k_max: int = DEFAULT_KMAX, predicted_class: bool = False) -> list[KCurve]:
    """Reveal curves for every bag, ordered by slide id."""
    bags = sorted(check_bags(bags), key=lambda b: b.id)

    def one(bag):
        curve = reveal_curve(model, bag, score_fn(bag), ranking=ranking, k_max=k_max)
        if predicted_class:
            y_hat = int(np.argmax(model.forward(bag).probs))
            curve = predicted_class_curve(curve, y_hat, bag.label)
        return curve

    return map_bags(one, bags)


# -- selected-only and predicted-class variants --------------------------------
def selected_only_eval(
    model,
    bags,
    score_fn,
    k: int | None = 32,
    adaptive: tuple[float, int] | None = None,
) -> float:
    """AUC of ``p_1`` when each slide is restricted to its top-K ranked tiles."""
    bags = sorted(check_bags(bags), key=lambda b: b.id)
    if (k is None) == (adaptive is None):
        raise ValueError("pass exactly one of k or adaptive")

    def one(bag):
        budget = adaptive_k(bag.n_real, *adaptive) if adaptive else k
        if budget >= bag.n_real:
            return model.forward(bag).probs[1]
        excluded = np.ones(bag.n_real, dtype=bool)
        excluded[stable_order(score_fn(bag))[:budget]] = False
        return model.forward(bag, mask=excluded).probs[1]

    scores = np.asarray(map_bags(one, bags))
    return roc_auc(scores, [b.label for b in bags])


def predicted_class_curve(curve: KCurve, y_hat: int, y: int) -> KCurve:
    """Track the full-bag prediction instead of the label (binary only)."""
    if curve.probs.shape[1] != 2:
        raise ValueError("the predicted-class variant is defined for two classes only")
    if y_hat == y:
        return curve
    return KCurve(curve.slide_id, curve.n_real, curve.schedule, curve.probs, curve.ranking, int(y_hat))


# -- dataset-level summary ---------------------------------------------------
@dataclass
class SrpAggregate:
    ranking: str
    kappa: float
    k_max: int
    n_slides: int
    reach: float
    msk_cond: float | None
    aukc: float

    def to_dict(self) -> dict:
        return {
            "ranking": self.ranking,
            "kappa": self.kappa,
            "k_max": self.k_max,
            "n_slides": self.n_slides,
            "reach": self.reach,
            "msk_cond": self.msk_cond,
            "aukc": self.aukc,
        }


def aggregate(curves: Sequence[KCurve], kappa: float, k_max: int) -> tuple[SrpAggregate, list[SrpSlideSummary]]:
    if not curves:
        raise ValueError("no curves to aggregate")
    tags = {c.ranking for c in curves}
    if len(tags) != 1:
        raise ValueError(f"curves mix rankings {sorted(tags)}")
    summaries = [summarize(c, kappa) for c in sorted(curves, key=lambda c: c.slide_id)]
    agg = SrpAggregate(tags.pop(), kappa, k_max, len(summaries), reach(summaries), msk_cond(summaries), mean_aukc(summaries))
    return agg, summaries


def kappa_sweep(curves: Sequence[KCurve], k_max: int, kappas: Sequence[float] = KAPPA_SWEEP) -> list[SrpAggregate]:
    return [aggregate(curves, kap, k_max)[0] for kap in kappas]


def mean_or_none(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else None


__all__ = [
    "DEFAULT_KMAX",
    "EQUAL_BUDGET_KMAX",
    "DELETION_GRID",
    "KAPPA_SWEEP",
    "SHI_EPS",
    "RANKINGS",
    "KCurve",
    "SrpSlideSummary",
    "SrpAggregate",
    "ShiReport",
    "DeletionCurve",
    "reveal_schedule",
    "check_schedule",
    "reveal_curve",
    "msk",
    "aukc",
    "summarize",
    "reach",
    "msk_cond",
    "mean_aukc",
    "shi",
    "deletion_curve",
    "deletion_auc",
    "random_scores",
    "oracle_scores",
    "ranking_fn",
    "map_bags",
    "srp_curves",
    "selected_only_eval",
    "predicted_class_curve",
    "aggregate",
    "kappa_sweep",
    "mean_or_none",
]
