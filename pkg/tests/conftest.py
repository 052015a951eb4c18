import numpy as np
import pytest

from foci.backbones import make_backbone
from foci.bags import SynthConfig, generate_synthetic
from foci.training import FOCISelector

SMALL = dict(n_slides=40, tiles_min=12, tiles_max=20, d=6, evidence_min=2, evidence_max=4, seed=3)
SMALL_BACKBONE = dict(hidden=8, epochs=4, lr=3e-3)


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SynthConfig(**SMALL))


@pytest.fixture(scope="session")
def trained(small_data):
    """One small frozen backbone per archetype."""
    ds, _ = small_data
    out = {}
    for arch in ("attention_pool", "cls_transformer", "hard_topk"):
        extra = {"n_layers": 1, "n_heads": 2} if arch == "cls_transformer" else {"k_pool": 4} if arch == "hard_topk" else {}
        out[arch] = make_backbone(arch, seed=0, **SMALL_BACKBONE, **extra).fit(ds)
    return out


@pytest.fixture(scope="session")
def small_selector(small_data, trained):
    ds, _ = small_data
    return FOCISelector(trained["attention_pool"], k=4, epochs=3, warmup_epochs=1, lr_max=1e-2, seed=0).fit(ds)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance verdict lines ----------------------------------------------------
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the terminal summary, then assert."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
