"""Evaluation reports: deterministic JSON, seed merging, CSV tables and SVG curves.

A report is a plain dict::

    {"format": REPORT_FORMAT,
     "configs": [run config, ...],
     "inputs": {name: sha256},
     "rows": [flat metric record, ...],   # one per (mode, ranking, seed, kappa, ...)
     "summary": [grouped mean/std record, ...],
     "curves": [per-slide record, ...]}

Wall-clock data never enters the report; :func:`write_report` puts it in a
sidecar ``*.meta.json`` so reruns produce byte-identical report files.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import time
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .stats import wilcoxon_signed_rank

REPORT_FORMAT = "foci-report/1"
SEED_KEY = "seed"
# numeric columns that are averaged over seeds; everything else is a grouping key
METRIC_KEYS = (
    "reach",
    "msk_cond",
    "aukc",
    "shi",
    "deletion_auc",
    "selected_only_auc",
    "n_slides",
    "msk_cond_base",
    "msk_cond_foci",
)


class ReportError(ValueError):
    """A report file that cannot be read or merged."""


# -- small numeric helpers ----------------------------------------------------
def mean_std(values: Iterable[float | None]) -> tuple[float | None, float | None, int]:
    """Mean and sample standard deviation (n - 1) of the defined values.

    Returns ``(None, None, 0)`` when nothing is defined and a zero spread
    for a single value.
    """
    vals = [float(v) for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return None, None, 0
    arr = np.asarray(vals)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std, arr.size


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _plain(x):
    """Recursively convert numpy scalars/arrays and tuples to JSON types."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def dumps(report: dict) -> str:
    return json.dumps(_plain(report), sort_keys=True, indent=1) + "\n"


# -- construction and merging -----------------------------------------------
def paired_tests(rows) -> list[dict]:
    """Wilcoxon signed-rank on per-seed ``msk_cond_base - msk_cond_foci``."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if r.get("mode") != "shi" or r.get("msk_cond_base") is None or r.get("msk_cond_foci") is None:
            continue
        key = (r["archetype"], r["kappa"], r["k_max"], r["predicted_class"])
        groups.setdefault(key, []).append(r["msk_cond_base"] - r["msk_cond_foci"])
    out = []
    for (arch, kap, kmax, pc), diffs in sorted(groups.items()):
        rec = {"archetype": arch, "kappa": kap, "k_max": kmax, "predicted_class": pc, "n_pairs": len(diffs)}
        try:
            w = wilcoxon_signed_rank(diffs)
            rec.update(w_plus=w.statistic, p_two_sided=w.p_two_sided, exact=w.exact)
        except ValueError as exc:
            rec["undefined"] = str(exc)
        out.append(rec)
    return out


def _group_key(row: dict) -> tuple:
    return tuple(sorted((k, json.dumps(_plain(v))) for k, v in row.items() if k != SEED_KEY and k not in METRIC_KEYS))


def summarize_rows(rows: Sequence[dict]) -> list[dict]:
    """Group rows on their non-metric columns and reduce metrics over seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(_group_key(r), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        rec = {k: json.loads(v) for k, v in key}
        rec["seeds"] = sorted({m[SEED_KEY] for m in members if SEED_KEY in m})
        rec["n_runs"] = len(members)
        for metric in METRIC_KEYS:
            if any(metric in m for m in members):
                mu, sd, n = mean_std(m.get(metric) for m in members)
                rec[metric] = {"mean": mu, "std": sd, "n": n}
        out.append(rec)
    return out


def make_report(config: dict, inputs: dict[str, str], rows: Sequence[dict], curves: Sequence[dict] = ()) -> dict:
    rows = [_plain(r) for r in rows]
    return {
        "format": REPORT_FORMAT,
        "configs": [_plain(config)],
        "inputs": dict(sorted(inputs.items())),
        "rows": rows,
        "summary": summarize_rows(rows),
        "tests": paired_tests(rows),
        "curves": [_plain(c) for c in curves],
    }


def merge_reports(reports: Sequence[dict]) -> dict:
    """Concatenate rows and curves, then recompute the seed summary.

    Merging a single report returns an equal report.
    """
    if not reports:
        raise ReportError("nothing to merge")
    for r in reports:
        if r.get("format") != REPORT_FORMAT:
            raise ReportError(f"unsupported report format {r.get('format')!r}")
    inputs: dict[str, str] = {}
    for r in reports:
        for name, digest in r["inputs"].items():
            if inputs.setdefault(name, digest) != digest:
                raise ReportError(f"input {name!r} has different checksums across reports")
    rows = [row for r in reports for row in r["rows"]]
    return {
        "format": REPORT_FORMAT,
        "configs": [c for r in reports for c in r["configs"]],
        "inputs": dict(sorted(inputs.items())),
        "rows": copy.deepcopy(rows),
        "summary": summarize_rows(rows),
        "tests": paired_tests(rows),
        "curves": copy.deepcopy([c for r in reports for c in r["curves"]]),
    }


# -- files ----------------------------------------------------------------------
def write_report(path, report: dict) -> Path:
    """Write ``report`` deterministically plus a ``.meta.json`` timestamp sidecar."""
    path = Path(path)
    path.write_text(dumps(report))
    meta = {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "report_sha256": file_sha256(path)}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return path


def read_report(path) -> dict:
    try:
        report = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"{path}: {exc}") from None
    if not isinstance(report, dict) or report.get("format") != REPORT_FORMAT:
        raise ReportError(f"{path}: not a {REPORT_FORMAT} report")
    return report


def summary_csv(report: dict) -> str:
    """Flatten the summary to one CSV line per group (``metric_mean``, ``metric_std``)."""
    summary = report["summary"]
    keys: list[str] = []
    metrics: list[str] = []
    for rec in summary:
        for k, v in rec.items():
            if k in METRIC_KEYS:
                if k not in metrics:
                    metrics.append(k)
            elif k not in keys:
                keys.append(k)
    keys.sort()
    metrics = [m for m in METRIC_KEYS if m in metrics]
    header = keys + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for rec in summary:
        line = []
        for k in keys:
            v = rec.get(k, "")
            line.append(json.dumps(v) if isinstance(v, (list, dict)) else v)
        for m in metrics:
            cell = rec.get(m) or {}
            line += [_fmt(cell.get("mean")), _fmt(cell.get("std"))]
        w.writerow(line)
    return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# -- curves ---------------------------------------------------------------------
def _step_value(schedule: Sequence[int], values: Sequence[float], k: int) -> float:
    """Value at the largest scheduled count <= k (the last one past the end)."""
    idx = np.searchsorted(np.asarray(schedule), k, side="right") - 1
    return float(values[max(int(idx), 0)])


def curve_series(curves: Sequence[dict], grid: Sequence[int] | None = None) -> dict:
    """Mean target-class confidence vs reveal count, per ranking.

    Slides are averaged within a seed first; the band is the sample std of
    those per-seed means. Returns ``{ranking: {"k", "mean", "std", "n_seeds"}}``.
    """
    if not curves:
        return {}
    if grid is None:
        grid = sorted({k for c in curves for k in c["curve"]["schedule"]})
    grid = [int(k) for k in grid]
    by_rank: dict[str, dict[int, list[list[float]]]] = {}
    for rec in curves:
        c = rec["curve"]
        probs = np.asarray(c["probs"], dtype=np.float64)
        p = probs[:, int(c["target"])]
        vals = [_step_value(c["schedule"], p, k) for k in grid]
        by_rank.setdefault(rec["ranking"], {}).setdefault(int(rec.get(SEED_KEY, 0)), []).append(vals)
    out = {}
    for rank in sorted(by_rank):
        seed_means = np.array([np.mean(v, axis=0) for _, v in sorted(by_rank[rank].items())])
        std = seed_means.std(axis=0, ddof=1) if len(seed_means) > 1 else np.zeros(len(grid))
        out[rank] = {"k": grid, "mean": seed_means.mean(axis=0).tolist(), "std": std.tolist(), "n_seeds": len(seed_means)}
    return out


_STYLE = {"native": "", "foci": ' stroke-dasharray="6 4"', "random": ' stroke-dasharray="2 3"'}
_COLOUR = {"native": "#1f4e9c", "foci": "#c0392b", "random": "#7f7f7f"}


def curves_svg(series: dict, kappa: float | None = None, width: int = 480, height: int = 320, title: str = "") -> str:
    """Confidence-vs-count plot: one polyline per ranking's seed mean, ±1 std band.

    The x axis is log2 of the reveal count, so the dense low-K region stays legible.
    """
    ml, mr, mt, mb = 48, 96, 28, 36
    pw, ph = width - ml - mr, height - mt - mb
    ks = sorted({k for s in series.values() for k in s["k"]}) or [1, 2]
    x_lo, x_hi = math.log2(ks[0]), math.log2(max(ks[-1], ks[0] * 2))

    def sx(k):
        return ml + pw * (math.log2(k) - x_lo) / (x_hi - x_lo)

    def sy(p):
        return mt + ph * (1.0 - min(max(p, 0.0), 1.0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    if title:
        parts.append(f'<text x="{ml}" y="{mt - 10}" font-size="12">{escape(title)}</text>')
    for p in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{ml - 6}" y="{sy(p) + 4:.2f}" font-size="10" text-anchor="end">{p:g}</text>')
    for k in ks:
        if k & (k - 1) == 0:
            parts.append(f'<text x="{sx(k):.2f}" y="{mt + ph + 14}" font-size="10" text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 6}" font-size="11" text-anchor="middle">tiles revealed (K)</text>')
    if kappa is not None:
        parts.append(
            f'<line class="kappa" x1="{ml}" y1="{sy(kappa):.2f}" x2="{ml + pw}" y2="{sy(kappa):.2f}" '
            f'stroke="#444" stroke-dasharray="1 3"/>'
        )
    for i, (rank, s) in enumerate(sorted(series.items())):
        colour = _COLOUR.get(rank, "#2e8b57")
        mean, std = np.asarray(s["mean"]), np.asarray(s["std"])
        upper = [f"{sx(k):.2f},{sy(m + d):.2f}" for k, m, d in zip(s["k"], mean, std)]
        lower = [f"{sx(k):.2f},{sy(m - d):.2f}" for k, m, d in reversed(list(zip(s["k"], mean, std)))]
        parts.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{colour}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{sx(k):.2f},{sy(m):.2f}" for k, m in zip(s["k"], mean))
        parts.append(
            f'<polyline class="series" data-ranking="{escape(rank)}" points="{pts}" fill="none" '
            f'stroke="{colour}" stroke-width="1.5"{_STYLE.get(rank, "")}/>'
        )
        y = mt + 14 * (i + 1)
        parts.append(f'<line x1="{ml + pw + 8}" y1="{y}" x2="{ml + pw + 28}" y2="{y}" stroke="{colour}"{_STYLE.get(rank, "")}/>')
        parts.append(f'<text x="{ml + pw + 32}" y="{y + 4}" font-size="10">{escape(rank)} (n={s["n_seeds"]})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


__all__ = [
    "REPORT_FORMAT",
    "METRIC_KEYS",
    "ReportError",
    "mean_std",
    "file_sha256",
    "dumps",
    "summarize_rows",
    "paired_tests",
    "make_report",
    "merge_reports",
    "write_report",
    "read_report",
    "summary_csv",
    "curve_series",
    "curves_svg",
]
