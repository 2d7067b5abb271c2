import pytest
import torch
from hypothesis import settings

from recsm.backbone import BackboneConfig
from recsm.pipeline import ModelConfig, RecSM

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

TINY_BACKBONE = BackboneConfig(base_channels=4, pyramid_channels=(8, 8, 8))


def tiny_model(k=1, seed=0, dtype=torch.float32, **kw) -> RecSM:
    torch.manual_seed(seed)
    cfg = ModelConfig(k=k, backbone=TINY_BACKBONE, dom_channels=8, dom_image_channels=4, **kw)
    return RecSM(cfg).to(dtype)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_TITLES = {
    1: "R-schedule exactness",
    2: "residual bound",
    3: "zero-residual identity",
    4: "gradient fidelity",
    5: "overfit convergence",
    6: "stacking trend",
    7: "ablation directions",
    8: "loss and schedule exactness",
    9: "shared-weight invariant",
    10: "parameter-growth structure",
    11: "metric oracles and PNG16 codec",
    12: "generator statistics",
}
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores the verdict printed in the acceptance summary."""
    def _record(n: int, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {title}")
