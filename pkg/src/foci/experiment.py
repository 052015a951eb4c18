"""End-to-end headroom experiment on planted-evidence data.

For each seed: generate a dataset, pre-train and freeze every backbone
archetype, train a FOCI selector on top, then compare the native and FOCI
rankings under the reveal protocol. Optional ablation runs retrain the
selector with one loss weight zeroed.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbones import ARCHETYPES, make_backbone
from .bags import SynthConfig, generate_synthetic, prefilter_dataset
from .srp import (
    DEFAULT_KMAX,
    EQUAL_BUDGET_KMAX,
    aggregate,
    random_scores,
    shi,
    srp_curves,
)
from .training import FOCISelector, random_recall_expectation

log = logging.getLogger(__name__)


@dataclass
class HeadroomConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    archetypes: tuple[str, ...] = tuple(ARCHETYPES)
    synth: dict = field(default_factory=dict)  # SynthConfig overrides (seed is set per run)
    backbone: dict = field(default_factory=dict)
    selector: dict = field(default_factory=dict)
    kappa: float = 0.9
    k_max: int = DEFAULT_KMAX
    ablation_k_max: int = EQUAL_BUDGET_KMAX
    recall_k: int = 32
    n_cap: int | None = None
    ablations: tuple[str, ...] = ("suff", "excl")
    ablation_archetype: str = "cls_transformer"


def _srp_block(model, bags, score_fn, tag, kappa, k_max) -> dict:
    curves = srp_curves(model, bags, score_fn, tag, k_max=k_max)
    agg, _ = aggregate(curves, kappa, k_max)
    return agg.to_dict()


def run_seed(seed: int, cfg: HeadroomConfig) -> dict:
    """One seed of the experiment; returns a JSON-ready record."""
    ds, truth = generate_synthetic(SynthConfig(**{**cfg.synth, "seed": seed}))
    if cfg.n_cap is not None:
        ds, truth = prefilter_dataset(ds, cfg.n_cap, truth)
    test = ds.split("test")
    rand_recall = random_recall_expectation(test, truth, cfg.recall_k)
    out: dict = {"seed": seed, "random_recall": rand_recall, "archetypes": {}}
    for arch in cfg.archetypes:
        t0 = time.perf_counter()
        model = make_backbone(arch, **{**cfg.backbone, "seed": seed}).fit(ds)
        checksum = model.param_checksum()
        before = [model.forward(b).logits.copy() for b in test]
        sel = FOCISelector(model, **{**cfg.selector, "seed": seed}).fit(ds)
        if model.param_checksum() != checksum:
            raise RuntimeError(f"{arch}: backbone parameters changed during selector training")
        preserved = all(np.array_equal(a, model.forward(b).logits) for a, b in zip(before, test))
        native = _srp_block(model, test, model.native_ranking, "native", cfg.kappa, cfg.k_max)
        foci = _srp_block(model, test, sel.score_tiles, "foci", cfg.kappa, cfg.k_max)
        rec = {
            "test_auc": model.score(test),
            "recall": sel.recall_at_k(test, truth, cfg.recall_k),
            "native": native,
            "foci": foci,
            "shi": shi(native["msk_cond"], foci["msk_cond"]),
            "logits_preserved": preserved,
            "k_violations": sel.k_violations_,
            "ste_max_dev": sel.ste_max_dev_,
        }
        if arch == cfg.ablation_archetype and cfg.ablations:
            budget = cfg.ablation_k_max
            rec["ablation"] = {"k_max": budget, "full": _srp_block(model, test, sel.score_tiles, "foci", cfg.kappa, budget)}
            for term in cfg.ablations:
                abl = FOCISelector(model, **{**cfg.selector, "seed": seed, "ablate": term}).fit(ds)
                rec["ablation"][term] = _srp_block(model, test, abl.score_tiles, "foci", cfg.kappa, budget)
        rec["seconds"] = time.perf_counter() - t0
        log.info("seed %d %s: %s", seed, arch, {k: v for k, v in rec.items() if k not in ("native", "foci")})
        out["archetypes"][arch] = rec
    return out


def run_headroom(cfg: HeadroomConfig | None = None) -> dict:
    cfg = cfg or HeadroomConfig()
    return {"config": asdict(cfg), "runs": [run_seed(s, cfg) for s in cfg.seeds]}


def random_ranking_curves(model, bags, seed: int, kappa: float, k_max: int) -> dict:
    """Reveal summary for the seeded random-ranking control."""
    return _srp_block(model, bags, lambda b: random_scores(b, seed), "random", kappa, k_max)


def headroom_checks(result: dict) -> dict[str, bool]:
    """Directional checks over all seeds of :func:`run_headroom` output."""
    runs = result["runs"]
    checks: dict[str, bool] = {}
    checks["auc"] = all(r["archetypes"][a]["test_auc"] >= 0.95 for r in runs for a in r["archetypes"])
    checks["recall"] = all(
        r["archetypes"][a]["recall"] >= 2.0 * r["random_recall"] for r in runs for a in r["archetypes"]
    )
    tr = [r["archetypes"].get("cls_transformer") for r in runs]
    checks["shi_transformer"] = all(t is not None and t["shi"] is not None and t["shi"] > 0 for t in tr)
    ap_ok = True
    for r in runs:
        a = r["archetypes"].get("attention_pool")
        if a is None:
            ap_ok = False
            continue
        base = a["native"]["msk_cond"]
        if base is not None and base <= 2:
            ap_ok &= a["shi"] is not None and a["shi"] <= 0.1
    checks["shi_attention_pool"] = ap_ok
    abl_ok = True
    found = False
    for r in runs:
        for a in r["archetypes"].values():
            if "ablation" not in a:
                continue
            found = True
            full = a["ablation"]["full"]["reach"]
            for term, block in a["ablation"].items():
                if term in ("full", "k_max"):
                    continue
                abl_ok &= block["reach"] < full
    checks["ablation_reach"] = found and abl_ok
    return checks


def summarize_runs(result: dict) -> dict:
    """Per-archetype means over seeds of the headline numbers."""
    out = {}
    archs = result["runs"][0]["archetypes"].keys()
    for a in archs:
        recs = [r["archetypes"][a] for r in result["runs"]]
        out[a] = {
            "test_auc": float(np.mean([x["test_auc"] for x in recs])),
            "recall": float(np.mean([x["recall"] for x in recs])),
            "msk_cond_native": [x["native"]["msk_cond"] for x in recs],
            "msk_cond_foci": [x["foci"]["msk_cond"] for x in recs],
            "shi": [x["shi"] for x in recs],
        }
    return out


__all__ = ["HeadroomConfig", "run_seed", "run_headroom", "headroom_checks", "summarize_runs", "random_ranking_curves"]
