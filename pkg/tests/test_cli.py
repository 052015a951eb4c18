import csv
import hashlib
import io
import json
import shutil
import xml.etree.ElementTree as ET

import pytest

from foci.cli import main
from foci.srp import shi

GEN = ["--n-slides", "30", "--tiles-min", "12", "--tiles-max", "40", "--d", "6", "--evidence-min", "2", "--evidence-max", "3"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, bb, sel = root / "data", root / "bb", root / "sel"
    assert _run("gen", "--out", data, "--seed", 1, *GEN) == 0
    assert _run("train-backbone", "--data", data, "--archetype", "cls_transformer", "--epochs", 3, "--hidden", 8, "--out", bb) == 0
    assert _run("train-selector", "--data", data, "--backbone", bb / "backbone.focm", "--k", 4, "--epochs", 2, "--warmup-epochs", 1, "--out", sel) == 0
    return root


def test_gen_is_deterministic(pipeline, tmp_path):
    assert _run("gen", "--out", tmp_path, "--seed", 1, *GEN) == 0
    for f in (pipeline / "data").iterdir():
        assert _sha(f) == _sha(tmp_path / f.name), f.name


def test_training_outputs(pipeline):
    info = json.loads((pipeline / "sel" / "selector.json").read_text())
    assert info["backbone_checksum_before"] == info["backbone_checksum_after"]
    assert info["k_violations"] == 0
    assert 0.0 <= info["recall_at_k"] <= 1.0
    hist = (pipeline / "sel" / "selector_history.jsonl").read_text().splitlines()
    assert len(hist) == 2 and "suff" in json.loads(hist[0])
    assert json.loads((pipeline / "bb" / "backbone.json").read_text())["test_auc"] is not None


def test_all_lambdas_zero_keeps_initial_head(pipeline, tmp_path):
    zero = [a for t in ("suff", "hinge", "excl", "contig", "budget") for a in (f"--lambda-{t}", 0)]
    code = _run("train-selector", "--data", pipeline / "data", "--backbone", pipeline / "bb" / "backbone.focm", "--k", 4, "--epochs", 2, "--warmup-epochs", 1, *zero, "--out", tmp_path)
    assert code == 0
    info = json.loads((tmp_path / "selector.json").read_text())
    assert info["head_checksum_initial"] == info["head_checksum_final"]


def test_ablate_zeroes_one_term(pipeline, tmp_path):
    code = _run("train-selector", "--data", pipeline / "data", "--backbone", pipeline / "bb" / "backbone.focm", "--k", 4, "--epochs", 1, "--warmup-epochs", 1, "--ablate", "contig", "--out", tmp_path)
    assert code == 0
    cfg = json.loads((tmp_path / "selector.json").read_text())["config"]
    assert cfg["ablate"] == "contig"


def _evaluate(pipeline, out, *extra):
    return _run("evaluate", "--data", pipeline / "data", "--checkpoint", pipeline / "sel" / "selector.focm", "--out", out, *extra)


def test_kmax_restricts_schedule(pipeline, tmp_path):
    assert _evaluate(pipeline, tmp_path, "--kmax", 8, "--ranking", "foci", "--ranking", "random") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert max(max(c["curve"]["schedule"]) for c in rep["curves"]) <= 8
    assert {c["ranking"] for c in rep["curves"]} == {"foci", "random"}


def test_kappa_sweep_rows_share_aukc(pipeline, tmp_path):
    assert _evaluate(pipeline, tmp_path, "--kappa-sweep") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    rows = [r for r in rep["rows"] if r["mode"] == "srp"]
    assert sorted(r["kappa"] for r in rows) == [0.7, 0.8, 0.9, 0.95]
    assert len({r["aukc"] for r in rows}) == 1


def test_shi_matches_hand_computation(pipeline, tmp_path):
    assert _evaluate(pipeline, tmp_path, "--mode", "shi") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    srp = {r["ranking"]: r for r in rep["rows"] if r["mode"] == "srp"}
    (row,) = [r for r in rep["rows"] if r["mode"] == "shi"]
    assert row["msk_cond_base"] == srp["native"]["msk_cond"]
    assert row["msk_cond_foci"] == srp["foci"]["msk_cond"]
    assert row["shi"] == shi(srp["native"]["msk_cond"], srp["foci"]["msk_cond"])
    # per-slide msk values in the curves reproduce the conditional means
    for tag in ("native", "foci"):
        msks = [c["summary"]["msk"] for c in rep["curves"] if c["ranking"] == tag and c["summary"]["reached"]]
        if msks:
            assert sum(msks) / len(msks) == pytest.approx(srp[tag]["msk_cond"], abs=1e-12)


def test_deletion_and_selected_only(pipeline, tmp_path):
    assert _evaluate(pipeline, tmp_path / "d", "--mode", "deletion", "--ranking", "native") == 0
    rows = json.loads((tmp_path / "d" / "report.json").read_text())["rows"]
    assert rows[0]["mode"] == "deletion" and rows[0]["deletion_auc"] >= -1
    assert _evaluate(pipeline, tmp_path / "s", "--mode", "selected-only", "--ranking", "foci", "--adaptive-k", "0.1,2") == 0
    rows = json.loads((tmp_path / "s" / "report.json").read_text())["rows"]
    assert 0 <= rows[0]["selected_only_auc"] <= 1 and rows[0]["adaptive_k"] == [0.1, 2]


def test_evaluate_is_byte_identical_on_rerun(pipeline, tmp_path):
    for name in ("a", "b"):
        assert _evaluate(pipeline, tmp_path / name, "--mode", "shi", "--seeds", "0,1") == 0
    for f in ("report.json", "report.csv", "report_curves.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_report_merge(pipeline, tmp_path):
    for s in (0, 1, 2):
        assert _evaluate(pipeline, tmp_path / str(s), "--ranking", "random", "--seed", s) == 0
    assert _run("report", *[tmp_path / str(s) / "report.json" for s in (0, 1, 2)], "--out", tmp_path / "m") == 0
    merged = json.loads((tmp_path / "m" / "merged.json").read_text())
    assert merged["summary"][0]["seeds"] == [0, 1, 2]
    root = ET.fromstring((tmp_path / "m" / "merged_curves.svg").read_text())
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 1
    header = next(csv.reader(io.StringIO((tmp_path / "m" / "merged.csv").read_text())))
    assert "reach_mean" in header and "reach_std" in header
    # merging one report is the identity
    assert _run("report", tmp_path / "0" / "report.json", "--out", tmp_path / "one") == 0
    assert (tmp_path / "one" / "merged.json").read_bytes() == (tmp_path / "0" / "report.json").read_bytes()


def test_training_is_byte_identical_on_rerun(pipeline, tmp_path):
    args = ["--data", pipeline / "data", "--backbone", pipeline / "bb" / "backbone.focm", "--k", 4, "--epochs", 2, "--warmup-epochs", 1]
    assert _run("train-selector", *args, "--out", tmp_path) == 0
    for f in ("selector.focm", "selector_history.jsonl"):
        assert (tmp_path / f).read_bytes() == (pipeline / "sel" / f).read_bytes()


def test_exit_codes(pipeline, tmp_path, capsys):
    # configuration errors
    assert _run("train-selector", "--data", pipeline / "data", "--backbone", pipeline / "bb" / "backbone.focm", "--epochs", 2, "--warmup-epochs", 5, "--out", tmp_path) == 2
    assert _evaluate(pipeline, tmp_path, "--kmax", 0) == 2
    assert _run("evaluate", "--data", pipeline / "data", "--checkpoint", pipeline / "bb" / "backbone.focm", "--ranking", "foci", "--out", tmp_path) == 2
    with pytest.raises(SystemExit) as exc:
        _run("evaluate", "--data", pipeline / "data", "--checkpoint", "x", "--kappa", "1.5", "--out", tmp_path)
    assert exc.value.code == 2
    # data errors
    assert _run("train-backbone", "--data", tmp_path / "missing", "--out", tmp_path) == 3
    bad = tmp_path / "bad.focm"
    bad.write_bytes(b"nope")
    assert _evaluate(pipeline, tmp_path, "--checkpoint", bad) == 3
    broken = tmp_path / "broken"
    shutil.copytree(pipeline / "data", broken)
    bags = next(p for p in broken.iterdir() if p.suffix not in (".json",) and p.is_file() and p.stat().st_size > 1000)
    bags.write_bytes(bags.read_bytes()[:-7])
    assert _run("train-backbone", "--data", broken, "--out", tmp_path) == 3
    (tmp_path / "r.json").write_text("{}")
    assert _run("report", tmp_path / "r.json", "--out", tmp_path) == 3
    capsys.readouterr()
