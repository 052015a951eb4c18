import csv
import io
import json
import xml.etree.ElementTree as ET

import pytest

from foci import report as R

SVG = "{http://www.w3.org/2000/svg}"


def _rows():
    return [
        {"mode": "srp", "archetype": "a", "ranking": "native", "kappa": 0.9, "seed": s, "reach": v, "aukc": v / 4, "msk_cond": None if s == 3 else v}
        for s, v in ((1, 1.0), (2, 2.0), (3, 3.0))
    ]


def _curves():
    out = []
    for seed in (1, 2):
        for rank, p in (("native", 0.6), ("foci", 0.8)):
            curve = {"id": f"s{seed}", "n_real": 4, "ranking": rank, "target": 1, "schedule": [1, 2, 4], "probs": [[1 - p, p]] * 3}
            out.append({"kind": "srp", "seed": seed, "ranking": rank, "curve": curve, "summary": {}})
    return out


def test_mean_std_sample_convention():
    assert R.mean_std([1, 2, 3]) == (2.0, 1.0, 3)
    assert R.mean_std([5.0]) == (5.0, 0.0, 1)
    assert R.mean_std([None, float("nan")]) == (None, None, 0)


def test_summary_over_seeds():
    rep = R.make_report({"x": 1}, {"data": "abc"}, _rows())
    (rec,) = rep["summary"]
    assert rec["reach"] == {"mean": 2.0, "std": 1.0, "n": 3}
    assert rec["msk_cond"]["n"] == 2
    assert rec["seeds"] == [1, 2, 3] and rec["n_runs"] == 3


def test_merge_one_is_identity():
    rep = R.make_report({"x": 1}, {"data": "abc"}, _rows(), _curves())
    assert R.merge_reports([rep]) == rep
    assert R.dumps(R.merge_reports([rep])) == R.dumps(rep)


def test_merge_three_single_seed_reports():
    reps = [R.make_report({"seed": r["seed"]}, {"data": "abc"}, [r]) for r in _rows()]
    merged = R.merge_reports(reps)
    assert merged["summary"][0]["reach"] == {"mean": 2.0, "std": 1.0, "n": 3}
    assert len(merged["configs"]) == 3


def test_merge_rejects_conflicts():
    a = R.make_report({}, {"data": "abc"}, _rows())
    b = R.make_report({}, {"data": "xyz"}, _rows())
    with pytest.raises(R.ReportError):
        R.merge_reports([a, b])
    with pytest.raises(R.ReportError):
        R.merge_reports([])
    with pytest.raises(R.ReportError):
        R.merge_reports([{"format": "other"}])


def test_paired_tests():
    rows = [
        {"mode": "shi", "archetype": "t", "kappa": 0.9, "k_max": 256, "predicted_class": False, "seed": s, "msk_cond_base": 5.0 + s, "msk_cond_foci": 2.0}
        for s in range(5)
    ]
    (t,) = R.paired_tests(rows)
    assert t["n_pairs"] == 5 and t["p_two_sided"] == 2 / 32
    flat = [dict(r, msk_cond_foci=r["msk_cond_base"]) for r in rows]
    assert "undefined" in R.paired_tests(flat)[0]


def test_write_read_and_sidecar(tmp_path):
    rep = R.make_report({"x": 1}, {}, _rows())
    path = R.write_report(tmp_path / "r.json", rep)
    assert R.read_report(path) == json.loads(R.dumps(rep))
    meta = json.loads((tmp_path / "r.meta.json").read_text())
    assert meta["report_sha256"] == R.file_sha256(path) and "written_at" in meta
    first = path.read_bytes()
    R.write_report(path, rep)
    assert path.read_bytes() == first
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(R.ReportError):
        R.read_report(tmp_path / "bad.json")


def test_non_finite_values_become_null():
    assert json.loads(R.dumps({"a": float("inf"), "b": [float("nan")]})) == {"a": None, "b": [None]}


def test_csv_flattening():
    rep = R.make_report({}, {}, _rows())
    rows = list(csv.reader(io.StringIO(R.summary_csv(rep))))
    header, body = rows[0], rows[1:]
    assert len(body) == 1
    rec = dict(zip(header, body[0]))
    assert float(rec["reach_mean"]) == 2.0 and float(rec["reach_std"]) == 1.0
    assert rec["archetype"] == "a"


def test_curve_series_and_band():
    series = R.curve_series(_curves())
    assert set(series) == {"foci", "native"}
    assert series["foci"]["mean"] == pytest.approx([0.8, 0.8, 0.8])
    assert series["native"]["std"] == pytest.approx([0.0, 0.0, 0.0])
    assert series["native"]["n_seeds"] == 2


def test_svg_is_well_formed_with_one_polyline_per_ranking():
    svg = R.curves_svg(R.curve_series(_curves()), kappa=0.9, title="a < b")
    root = ET.fromstring(svg)
    lines = root.findall(f"{SVG}polyline")
    assert sorted(p.get("data-ranking") for p in lines) == ["foci", "native"]
    assert len(root.findall(f"{SVG}polygon")) == 2
    assert any(e.get("class") == "kappa" for e in root.iter(f"{SVG}line"))
