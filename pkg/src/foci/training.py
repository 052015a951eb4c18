"""Selector objective and the frozen-backbone training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import engine as E
from ._validation import check_bags, stable_order
from .backbones import TrainingAbort, cross_entropy
from .bags import Bag, Dataset
from .engine import Tensor
from .optim import AdamW, warmup_cosine
from .selector import (
    MULTIPLICATIVE,
    SOFT,
    STE,
    GateConfig,
    SelectorHead,
    apply_gate,
    build_views,
    gate_noise,
)

log = logging.getLogger(__name__)

LOSS_TERMS = ("suff", "hinge", "excl", "contig", "budget", "entropy")
ENTROPY_CLAMP = 1e-12


@dataclass
class LossWeights:
    suff: float = 0.5
    hinge: float = 1.0
    excl: float = 0.5
    contig: float = 0.01
    budget: float = 5e-3
    entropy: float = 0.1  # soft gate only
    tau: float = 0.9
    beta: float = 0.2

    def __post_init__(self):
        for name in LOSS_TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"lambda_{name} must be >= 0")
        if not (0 < self.tau < 1 and 0 < self.beta < 1):
            raise ValueError("tau and beta must lie in (0, 1)")

    def ablate(self, term: str | None) -> "LossWeights":
        if term is None:
            return self
        if term not in LOSS_TERMS:
            raise ValueError(f"unknown loss term {term!r}; choose from {LOSS_TERMS}")
        return LossWeights(**{**asdict(self), term: 0.0})


@dataclass
class LossBreakdown:
    full: float = 0.0
    suff: float = 0.0
    hinge: float = 0.0
    excl: float = 0.0
    contig: float = 0.0
    budget: float = 0.0
    entropy: float = 0.0
    total_selector: float = 0.0


# ------------------------------------------------------------------ losses


def true_class_prob(logits: Tensor, label: int) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[..., label] = 1.0
    return E.sum(E.mul(E.softmax(logits), onehot))


def loss_suff(logits_keep: Tensor, label: int) -> Tensor:
    return cross_entropy(logits_keep, label)


def loss_hinge(p_keep, tau: float) -> Tensor:
    """``max(tau - p_y(keep), 0)``."""
    return E.relu(E.sub(tau, p_keep))


def loss_excl(p_drop, beta: float) -> Tensor:
    """``max(p_y(drop) - beta, 0)``."""
    return E.relu(E.sub(p_drop, beta))


def scale_coords(coords: np.ndarray, coord_scale) -> np.ndarray:
    """Rescale pixel coordinates for the contiguity term.

    ``"extent"`` maps each bag into the unit box along its longer side, so the
    term does not grow with slide size; a number multiplies the coordinates.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coord_scale == "extent":
        lo = coords.min(axis=0)
        span = float(np.max(coords.max(axis=0) - lo))
        return (coords - lo) / span if span > 0 else coords - lo
    return coords * float(coord_scale)


def loss_contig(z, coords: np.ndarray) -> Tensor | None:
    """Selection-weighted spatial variance around the weighted centroid.

    Returns ``None`` when the selection mass is zero.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    n = coords.shape[0]
    zc = E.reshape(z, (n, 1))
    mass = E.sum(zc)
    if mass.item() <= 0:
        return None
    c = Tensor(np.asarray(coords, dtype=np.float64))
    centroid = E.div(E.matmul(E.transpose(zc), c), mass)  # (1, 2)
    sq = E.sum(E.square(E.sub(c, centroid)), axis=1)  # (n, 1)
    return E.div(E.sum(E.mul(zc, sq)), mass)


def loss_budget(weights) -> Tensor:
    """Selection mass: ``sum z`` (soft) or ``sum m~`` (hard, forward value K)."""
    return E.sum(weights)


def loss_entropy(z) -> Tensor:
    """Mean binary entropy of the soft gates, clamped away from 0 and 1."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    zc = E.clip(z, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    h = E.add(E.mul(zc, E.log(zc)), E.mul(E.sub(1.0, zc), E.log(E.sub(1.0, zc))))
    return E.neg(E.mean(h))


def monitor_full(logits_full, label: int) -> float:
    """Full-bag cross-entropy; a preservation monitor, never differentiated."""
    logits = logits_full if isinstance(logits_full, Tensor) else Tensor(np.asarray(logits_full).reshape(1, -1))
    return cross_entropy(E.stop_gradient(logits), label).item()


def selector_objective(
    backbone,
    head: SelectorHead,
    bag: Bag,
    tokens: np.ndarray,
    gate_config: GateConfig,
    weights: LossWeights,
    eps=None,
    coord_scale=1.0,
    gating: str = MULTIPLICATIVE,
) -> tuple[Tensor | None, dict[str, float], dict]:
    """Build the selector loss graph for one bag.

    Returns the total (``None`` if no term is active), the per-term values,
    and diagnostics (selected count, straight-through deviation).
    """
    a = head(tokens)
    gate = apply_gate(a, gate_config, eps)
    views = build_views(bag.n_real, gate, gating)
    y = bag.label
    terms: dict[str, Tensor] = {}
    values = {k: 0.0 for k in LOSS_TERMS}
    diag: dict = {}
    if gate.mode == STE:
        diag["n_selected"] = gate.n_selected
        diag["k_expected"] = min(gate_config.budget(bag.n_real), bag.n_real)
        diag["ste_dev"] = float(np.max(np.abs(gate.ste.data - gate.hard)))

    if weights.suff or weights.hinge:
        keep = backbone.forward_logits(bag, views.keep.excluded, views.keep.weights)
        if weights.suff:
            terms["suff"] = loss_suff(keep, y)
        if weights.hinge:
            terms["hinge"] = loss_hinge(true_class_prob(keep, y), weights.tau)
    if weights.excl:
        if views.drop is None:
            diag["drop_skipped"] = True
        else:
            drop = backbone.forward_logits(bag, views.drop.excluded, views.drop.weights)
            terms["excl"] = loss_excl(true_class_prob(drop, y), weights.beta)
    sel = E.reshape(gate.weights, (bag.n_real,))
    if weights.contig:
        lc = loss_contig(sel, scale_coords(bag.coords, coord_scale))
        if lc is None:
            log.debug("bag %s: zero selection mass, contiguity skipped", bag.id)
        else:
            terms["contig"] = lc
    if weights.budget:
        terms["budget"] = loss_budget(sel)
    if weights.entropy and gate.mode == SOFT:
        terms["entropy"] = loss_entropy(sel)

    total = None
    for name in LOSS_TERMS:
        if name not in terms:
            continue
        v = terms[name].item()
        if not math.isfinite(v):
            raise TrainingAbort(f"non-finite loss term {name!r} on bag {bag.id}", -1)
        values[name] = v
        weighted = E.mul(terms[name], getattr(weights, name))
        total = weighted if total is None else E.add(total, weighted)
    return total, values, diag


def total_from_terms(values: dict[str, float], weights: LossWeights) -> float:
    return float(sum(getattr(weights, k) * values[k] for k in LOSS_TERMS))


# -------------------------------------------------------------- estimator


class FOCISelector(TransformerMixin, BaseEstimator):
    """Post-hoc rationale selector trained over a frozen MIL backbone.

    ``fit`` trains only the selector head; ``transform`` returns per-tile
    selector logits (one array per bag), whose descending order is the
    selector's reveal ranking.
    """

    def __init__(
        self,
        backbone=None,
        gate="ste",
        k=32,
        temperature=0.5,
        adaptive_k=None,
        epochs=30,
        warmup_epochs=5,
        lr_max=1e-4,
        lr_min=1e-5,
        lr_mult=5.0,
        weight_decay=0.3,
        batch_size=2,
        lambda_suff=0.5,
        lambda_hinge=1.0,
        lambda_excl=0.5,
        lambda_contig=0.01,
        lambda_budget=5e-3,
        lambda_ent=0.1,
        tau=0.9,
        beta=0.2,
        coord_scale="extent",
        view_gating="multiplicative",
        ablate=None,
        seed=0,
        callback=None,
    ):
        self.backbone = backbone
        self.gate = gate
        self.k = k
        self.temperature = temperature
        self.adaptive_k = adaptive_k
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.lr_mult = lr_mult
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.lambda_suff = lambda_suff
        self.lambda_hinge = lambda_hinge
        self.lambda_excl = lambda_excl
        self.lambda_contig = lambda_contig
        self.lambda_budget = lambda_budget
        self.lambda_ent = lambda_ent
        self.tau = tau
        self.beta = beta
        self.coord_scale = coord_scale
        self.view_gating = view_gating
        self.ablate = ablate
        self.seed = seed
        self.callback = callback

    # configuration views -------------------------------------------------
    def gate_config(self) -> GateConfig:
        return GateConfig(self.gate, self.temperature, self.k, self.adaptive_k)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            self.lambda_suff,
            self.lambda_hinge,
            self.lambda_excl,
            self.lambda_contig,
            self.lambda_budget,
            self.lambda_ent,
            self.tau,
            self.beta,
        ).ablate(self.ablate)

    def _check_backbone(self):
        bb = self.backbone
        if bb is None:
            raise ValueError("FOCISelector needs a fitted backbone")
        check_is_fitted(bb, "params_")
        if not getattr(bb, "frozen_", False):
            raise ValueError("backbone must be frozen before selector training")
        return bb

    def tokens(self, bag: Bag) -> np.ndarray:
        return self._check_backbone().project(bag).data

    def init_head(self) -> SelectorHead:
        bb = self._check_backbone()
        self.head_ = SelectorHead(bb.hidden, seed=self.seed)
        return self.head_

    # training -----------------------------------------------------------
    def fit(self, bags, y=None):
        """Train the head; ``history_`` gets one record per epoch."""
        bb = self._check_backbone()
        if isinstance(bags, Dataset):
            bags = bags.split("train") or bags.bags
        bags = check_bags(bags, bb.n_features_in_)
        gate_cfg = self.gate_config()
        weights = self.loss_weights()
        head = self.init_head()
        self.history_ = []
        self.initial_checksum_ = head.checksum()
        active = any(getattr(weights, t) for t in LOSS_TERMS if t != "entropy" or gate_cfg.mode == SOFT)
        opt = AdamW(head.params, lr=self.lr_max, weight_decay=self.weight_decay, no_decay=SelectorHead.bias_names)
        token_cache = {b.id: bb.project(b).data for b in bags}
        # the backbone is frozen, so the full-view loss is the same every epoch
        full_loss = sum(monitor_full(bb.forward(b).logits, b.label) for b in bags) / len(bags)
        rng = np.random.default_rng([self.seed, 7])
        k_violations = 0
        ste_dev = 0.0
        for epoch in range(self.epochs):
            base = warmup_cosine(epoch, self.epochs, self.warmup_epochs, self.lr_max, self.lr_min)
            opt.lr = self.lr_mult * base
            sums = {k: 0.0 for k in LOSS_TERMS}
            total_sum = 0.0
            skipped = 0
            order = rng.permutation(len(bags))
            for start in range(0, len(order), self.batch_size):
                batch = sorted((bags[i] for i in order[start : start + self.batch_size]), key=lambda b: b.id)
                opt.zero_grad()
                for bag in batch:
                    eps = gate_noise(self.seed, bag.id, epoch, bag.n_real) if gate_cfg.mode == SOFT else None
                    total, values, diag = selector_objective(
                        bb, head, bag, token_cache[bag.id], gate_cfg, weights, eps, self.coord_scale, self.view_gating
                    )
                    if gate_cfg.mode == STE:
                        k_violations += int(diag["n_selected"] != diag["k_expected"])
                        ste_dev = max(ste_dev, diag["ste_dev"])
                    skipped += int(diag.get("drop_skipped", False))
                    for k in LOSS_TERMS:
                        sums[k] += values[k]
                    t_val = total_from_terms(values, weights)
                    if not math.isfinite(t_val):
                        raise TrainingAbort(f"non-finite total loss on bag {bag.id}", epoch)
                    total_sum += t_val
                    if total is not None:
                        E.backward(total)
                if active:
                    opt.step(scale=1.0 / len(batch))
            n = len(bags)
            breakdown = LossBreakdown(full=full_loss, total_selector=total_sum / n, **{k: sums[k] / n for k in LOSS_TERMS})
            record = {"epoch": epoch, "lr": opt.lr, **asdict(breakdown), "drop_skipped": skipped}
            if gate_cfg.mode == STE:
                record["k_violations"] = k_violations
                record["ste_max_dev"] = ste_dev
            if self.callback is not None:
                extra = self.callback(self, epoch)
                if extra:
                    record.update(extra)
            self.history_.append(record)
            log.info("selector epoch %d %s", epoch, record)
        self.k_violations_ = k_violations
        self.ste_max_dev_ = ste_dev
        return self

    # inference ----------------------------------------------------------
    def score_tiles(self, bag: Bag) -> np.ndarray:
        check_is_fitted(self, "head_")
        return self.head_(self.tokens(bag)).data.reshape(-1).copy()

    def transform(self, bags) -> list[np.ndarray]:
        return [self.score_tiles(b) for b in check_bags(bags)]

    def ranking(self, bag: Bag) -> np.ndarray:
        """Tile indices in reveal order (descending logit, ties by index)."""
        return stable_order(self.score_tiles(bag))

    def recall_at_k(self, bags, truth: dict, k: int = 32) -> float:
        """Mean fraction of planted evidence tiles among the top-``k`` scores."""
        vals = []
        for b in check_bags(bags):
            ev = truth[b.id]
            if len(ev) == 0:
                continue
            top = set(self.ranking(b)[:k].tolist())
            vals.append(len(top & set(int(i) for i in ev)) / len(ev))
        return float(np.mean(vals))


def write_history_jsonl(path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def random_recall_expectation(bags, truth: dict, k: int) -> float:
    """Expected evidence recall of a uniformly random ranking: ``min(k, N) / N``."""
    vals = [min(k, b.n_real) / b.n_real for b in check_bags(bags) if len(truth[b.id])]
    return float(np.mean(vals))


__all__ = [
    "LossWeights",
    "LossBreakdown",
    "FOCISelector",
    "loss_suff",
    "loss_hinge",
    "loss_excl",
    "loss_contig",
    "loss_budget",
    "loss_entropy",
    "monitor_full",
    "selector_objective",
    "true_class_prob",
    "total_from_terms",
    "scale_coords",
    "random_recall_expectation",
    "write_history_jsonl",
    "LOSS_TERMS",
]
