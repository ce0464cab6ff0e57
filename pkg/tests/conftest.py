from dataclasses import replace

import pytest

from cardio_anomaly.model import ModelConfig
from cardio_anomaly.training import RunConfig

# a few thousand parameters: trains in seconds at full record length
TINY_MODEL = ModelConfig(embed_dim=8, enc_channels=(4, 8, 8), dec_channels=(8, 8, 4), kernel=5, heads=2,
                         attr_hidden=8, cls_channels=8, cls_depth=1)


def tiny_run(**kw) -> RunConfig:
    base = RunConfig(epochs=2, batch_size=4, lr0=1e-3, val_fraction=0.25, model=TINY_MODEL)
    return replace(base, **kw)


@pytest.fixture
def tiny():
    return tiny_run


# acceptance verdicts, printed together at the end of the run
VERDICTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
