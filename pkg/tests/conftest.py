import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dce.data import GenConfig, generate_synthetic  # noqa: E402
from dce.engine import DceConfig  # noqa: E402
from dce.model import TrainConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_stream():
    cfg = GenConfig(num_domains=3, num_classes=5, d=6, rho=10, n_max=60, test_per_class=8, seed=3, thresholds=(10, 30))
    return generate_synthetic(cfg)


@pytest.fixture
def fast_cfg():
    return DceConfig(K=16, train=TrainConfig(epochs_stage1=3, epochs_stage2=2, batch_size=32, seed=1))


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title} ({detail})"
        _CRITERIA.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
