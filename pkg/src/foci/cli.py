"""``foci`` command line: generate data, train, evaluate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report as R
from .backbones import ARCHETYPES, make_backbone
from .bags import (
    BAGS_FILE,
    EVIDENCE_FILE,
    MANIFEST_FILE,
    BagFormatError,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    prefilter_dataset,
    save_dataset,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .srp import (
    DEFAULT_KMAX,
    KAPPA_SWEEP,
    RANKINGS,
    aggregate,
    deletion_curve,
    map_bags,
    ranking_fn,
    selected_only_eval,
    shi,
    srp_curves,
)
from .training import LOSS_TERMS, FOCISelector, write_history_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("srp", "deletion", "selected-only", "shi")
log = logging.getLogger("foci")


class ConfigError(ValueError):
    pass


# -- argument helpers ----------------------------------------------------------
def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _adaptive(text: str) -> tuple[float, int]:
    try:
        alpha, k_min = text.split(",")
        return float(alpha), int(k_min)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ALPHA,KMIN, got {text!r}") from None


def _kappa(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("kappa must lie in (0, 1)")
    return v


def _run_config(args) -> dict:
    skip = {"func", "out", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _data_inputs(data_dir) -> dict[str, str]:
    d = Path(data_dir)
    return {f"data/{name}": R.file_sha256(d / name) for name in (BAGS_FILE, MANIFEST_FILE, EVIDENCE_FILE) if (d / name).exists()}


def _load_data(args):
    ds, truth = load_dataset(args.data)
    if getattr(args, "ncap", None):
        ds, truth = prefilter_dataset(ds, args.ncap, truth)
    return ds, truth


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(R.dumps(obj))


# -- gen -------------------------------------------------------------------------
def cmd_gen(args) -> int:
    cfg = SynthConfig(
        n_slides=args.n_slides,
        tiles_min=args.tiles_min,
        tiles_max=args.tiles_max,
        d=args.d,
        evidence_min=args.evidence_min,
        evidence_max=args.evidence_max,
        evidence_separation=args.separation,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    ds, truth = generate_synthetic(cfg)
    out = _out_dir(args)
    save_dataset(out, ds, truth)
    _write_json(out / "gen_config.json", dataclasses.asdict(cfg))
    print(f"wrote {len(ds)} slides to {out}")
    return EXIT_OK


# -- training ------------------------------------------------------------------
def cmd_train_backbone(args) -> int:
    ds, _ = _load_data(args)
    params = {"seed": args.seed}
    for name in ("epochs", "lr", "hidden", "batch_size"):
        if getattr(args, name) is not None:
            params[name] = getattr(args, name)
    model = make_backbone(args.archetype, **params).fit(ds)
    out = _out_dir(args)
    save_checkpoint(out / "backbone.focm", model)
    write_history_jsonl(out / "backbone_history.jsonl", model.history_)
    info = {
        "config": _run_config(args),
        "inputs": _data_inputs(args.data),
        "backbone_checksum": model.param_checksum(),
        "test_auc": model.score(ds.split("test")) if ds.split("test") else None,
    }
    _write_json(out / "backbone.json", info)
    print(f"{args.archetype}: test AUC {info['test_auc']}")
    return EXIT_OK


def _selector_params(args) -> dict:
    params = {"gate": args.gate, "k": args.k, "adaptive_k": args.adaptive_k, "seed": args.seed, "ablate": args.ablate}
    for name in ("epochs", "warmup_epochs", "temperature"):
        if getattr(args, name) is not None:
            params[name] = getattr(args, name)
    for term in LOSS_TERMS:
        v = getattr(args, f"lambda_{term}")
        if v is not None:
            params["lambda_ent" if term == "entropy" else f"lambda_{term}"] = v
    return params


def cmd_train_selector(args) -> int:
    ds, truth = _load_data(args)
    model, _ = load_checkpoint(args.backbone)
    before = model.param_checksum()
    sel = FOCISelector(model, **_selector_params(args)).fit(ds)
    after = model.param_checksum()
    if before != after:
        raise FloatingPointError("backbone parameters changed during selector training")
    out = _out_dir(args)
    save_checkpoint(out / "selector.focm", model, sel)
    write_history_jsonl(out / "selector_history.jsonl", sel.history_)
    test = ds.split("test")
    info = {
        "config": _run_config(args),
        "inputs": {**_data_inputs(args.data), "backbone": R.file_sha256(args.backbone)},
        "backbone_checksum_before": before,
        "backbone_checksum_after": after,
        "head_checksum_initial": sel.initial_checksum_,
        "head_checksum_final": sel.head_.checksum(),
        "k_violations": getattr(sel, "k_violations_", 0),
        "recall_at_k": sel.recall_at_k(test, truth, args.k) if truth and test else None,
    }
    _write_json(out / "selector.json", info)
    print(f"selector trained; head unchanged: {info['head_checksum_initial'] == info['head_checksum_final']}")
    return EXIT_OK


# -- evaluation ----------------------------------------------------------------
def _runs(args) -> list[tuple[int, object, object]]:
    """``(seed, model, selector)`` per evaluation run."""
    loaded = [load_checkpoint(p) for p in args.checkpoint]
    if args.seeds:
        if len(loaded) == 1:
            return [(s, *loaded[0]) for s in args.seeds]
        if len(args.seeds) != len(loaded):
            raise ConfigError(f"--seeds lists {len(args.seeds)} seeds for {len(loaded)} checkpoints")
        return [(s, m, sel) for s, (m, sel) in zip(args.seeds, loaded)]
    if args.seed is not None:
        return [(args.seed, m, sel) for m, sel in loaded]
    return [(int(m.seed), m, sel) for m, sel in loaded]


def _rankings(args) -> list[str]:
    if args.mode == "shi":
        return ["native", "foci"]
    return args.ranking or ["native"]


def _score_fn(tag, model, selector, seed):
    if tag == "foci" and selector is None:
        raise ConfigError("the foci ranking needs a checkpoint written by train-selector")
    return ranking_fn(tag, model=model, selector=selector, seed=seed)


def _srp_rows(args, seed, model, selector, test):
    rows, curves, msk_by_rank = [], [], {}
    kappas = list(KAPPA_SWEEP) if args.kappa_sweep else [args.kappa]
    for tag in _rankings(args):
        cs = srp_curves(model, test, _score_fn(tag, model, selector, seed), tag, k_max=args.kmax, predicted_class=args.predicted_class)
        for kap in kappas:
            agg, _ = aggregate(cs, kap, args.kmax)
            rows.append({"mode": "srp", "archetype": model.archetype, "seed": seed, "predicted_class": args.predicted_class, **agg.to_dict()})
        agg, summaries = aggregate(cs, args.kappa, args.kmax)
        msk_by_rank[tag] = agg.msk_cond
        curves += [
            {"kind": "srp", "seed": seed, "ranking": tag, "curve": c.to_dict(), "summary": s.to_dict()}
            for c, s in zip(sorted(cs, key=lambda c: c.slide_id), summaries)
        ]
    if args.mode == "shi":
        base, foci = msk_by_rank["native"], msk_by_rank["foci"]
        rows.append(
            {
                "mode": "shi",
                "archetype": model.archetype,
                "seed": seed,
                "kappa": args.kappa,
                "k_max": args.kmax,
                "predicted_class": args.predicted_class,
                "msk_cond_base": base,
                "msk_cond_foci": foci,
                "shi": shi(base, foci),
            }
        )
    return rows, curves


def _deletion_rows(args, seed, model, selector, test):
    rows, curves = [], []
    for tag in _rankings(args):
        fn = _score_fn(tag, model, selector, seed)
        dcs = map_bags(lambda b: deletion_curve(model, b, fn(b)), sorted(test, key=lambda b: b.id))
        rows.append(
            {
                "mode": "deletion",
                "archetype": model.archetype,
                "seed": seed,
                "ranking": tag,
                "n_slides": len(dcs),
                "deletion_auc": float(np.mean([d.auc for d in dcs])),
            }
        )
        curves += [
            {"kind": "deletion", "seed": seed, "ranking": tag, "id": d.slide_id, "grid": d.grid, "delta": d.delta, "truncated": d.truncated}
            for d in dcs
        ]
    return rows, curves


def _selected_only_rows(args, seed, model, selector, test):
    rows = []
    budget = {"adaptive_k": list(args.adaptive_k)} if args.adaptive_k else {"k": args.k}
    for tag in _rankings(args):
        fn = _score_fn(tag, model, selector, seed)
        auc = selected_only_eval(model, test, fn, k=None if args.adaptive_k else args.k, adaptive=args.adaptive_k)
        rows.append({"mode": "selected-only", "archetype": model.archetype, "seed": seed, "ranking": tag, **budget, "selected_only_auc": auc})
    return rows, []


def _emit(out: Path, stem: str, rep: dict, kappa: float | None) -> None:
    R.write_report(out / f"{stem}.json", rep)
    (out / f"{stem}.csv").write_text(R.summary_csv(rep))
    srp = [c for c in rep["curves"] if c.get("kind") == "srp"]
    if srp:
        (out / f"{stem}_curves.svg").write_text(R.curves_svg(R.curve_series(srp), kappa=kappa))


def cmd_evaluate(args) -> int:
    if args.kmax < 1:
        raise ConfigError("--kmax must be >= 1")
    ds, _ = _load_data(args)
    test = ds.split(args.split)
    if not test:
        raise BagFormatError(f"split {args.split!r} is empty")
    handler = {"srp": _srp_rows, "shi": _srp_rows, "deletion": _deletion_rows, "selected-only": _selected_only_rows}[args.mode]
    rows, curves = [], []
    for seed, model, selector in _runs(args):
        r, c = handler(args, seed, model, selector, test)
        rows += r
        curves += c
    inputs = _data_inputs(args.data)
    for i, p in enumerate(args.checkpoint):
        inputs[f"checkpoint/{i}"] = R.file_sha256(p)
    rep = R.make_report(_run_config(args), inputs, rows, curves)
    out = _out_dir(args)
    _emit(out, "report", rep, args.kappa)
    for row in rep["summary"]:
        print(json.dumps({k: v for k, v in row.items() if k not in ("seeds",)}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    merged = R.merge_reports([R.read_report(p) for p in args.reports])
    out = _out_dir(args)
    kappa = args.kappa
    if kappa is None:
        kaps = {c.get("kappa") for c in merged["configs"]}
        kappa = kaps.pop() if len(kaps) == 1 else None
    _emit(out, "merged", merged, kappa)
    print(f"merged {len(args.reports)} report(s), {len(merged['rows'])} rows -> {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foci", description="Post-hoc rationale selection for frozen MIL classifiers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a planted-evidence dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-slides", type=int, default=200)
    g.add_argument("--tiles-min", type=int, default=64)
    g.add_argument("--tiles-max", type=int, default=128)
    g.add_argument("--d", type=int, default=32)
    g.add_argument("--evidence-min", type=int, default=4)
    g.add_argument("--evidence-max", type=int, default=8)
    g.add_argument("--separation", type=float, default=SynthConfig.evidence_separation)
    g.add_argument("--noise-sigma", type=float, default=1.0)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("train-backbone", help="pre-train and freeze a MIL backbone")
    b.add_argument("--data", required=True)
    b.add_argument("--archetype", choices=sorted(ARCHETYPES), default="attention_pool")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--epochs", type=int)
    b.add_argument("--lr", type=float)
    b.add_argument("--hidden", type=int)
    b.add_argument("--batch-size", type=int)
    b.add_argument("--ncap", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_train_backbone)

    s = sub.add_parser("train-selector", help="train a selector head over a frozen backbone")
    s.add_argument("--data", required=True)
    s.add_argument("--backbone", required=True, help="checkpoint from train-backbone")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gate", choices=("soft", "ste"), default="ste")
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--adaptive-k", type=_adaptive, metavar="ALPHA,KMIN")
    s.add_argument("--temperature", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--warmup-epochs", type=int)
    s.add_argument("--ablate", choices=LOSS_TERMS)
    s.add_argument("--ncap", type=int)
    for term in LOSS_TERMS:
        s.add_argument(f"--lambda-{term}", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_selector)

    e = sub.add_parser("evaluate", help="reveal, deletion, selected-only or headroom evaluation")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True, action="append", help="repeat once per seed")
    e.add_argument("--mode", choices=MODES, default="srp")
    e.add_argument("--ranking", choices=RANKINGS, action="append")
    e.add_argument("--seed", type=int)
    e.add_argument("--seeds", type=_int_list, metavar="A,B,C")
    e.add_argument("--kappa", type=_kappa, default=0.9)
    e.add_argument("--kappa-sweep", action="store_true")
    e.add_argument("--kmax", type=int, default=DEFAULT_KMAX)
    e.add_argument("--ncap", type=int)
    e.add_argument("--k", type=int, default=32)
    e.add_argument("--adaptive-k", type=_adaptive, metavar="ALPHA,KMIN")
    e.add_argument("--predicted-class", action="store_true")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="merge reports into CSV and SVG")
    r.add_argument("reports", nargs="+")
    r.add_argument("--kappa", type=_kappa)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BagFormatError, CheckpointError, R.ReportError, OSError) as exc:
        print(f"foci: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"foci: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"foci: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
