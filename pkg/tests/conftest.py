from __future__ import annotations

import pytest
import torch

from sgma import desk
from sgma.images import from_uint8
from sgma.surrogate.desk_clip import PACKAGED_WEIGHTS, DeskCLIP, DeskCLIPConfig, DeskCLIPModel


@pytest.fixture(scope="session")
def random_encoder64() -> DeskCLIP:
    """Untrained desk-clip in float64: fast, deterministic, exact gradients."""
    torch.manual_seed(1234)
    return DeskCLIP(DeskCLIPModel(DeskCLIPConfig(), desk.vocabulary()), id="desk-random", dtype=torch.float64)


@pytest.fixture(scope="session")
def desk_encoder() -> DeskCLIP:
    if not PACKAGED_WEIGHTS.exists():
        pytest.skip("packaged desk-clip weights missing")
    return DeskCLIP.pretrained()


@pytest.fixture(scope="session")
def desk_encoder64() -> DeskCLIP:
    if not PACKAGED_WEIGHTS.exists():
        pytest.skip("packaged desk-clip weights missing")
    return DeskCLIP.pretrained(dtype=torch.float64, id="desk-clip-f64")


@pytest.fixture(scope="session")
def corpus() -> list[desk.Scene]:
    return desk.desk_corpus()


@pytest.fixture(scope="session")
def scene_image(corpus) -> torch.Tensor:
    return from_uint8(corpus[1].image)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record a numbered criterion's verdict; the terminal summary lists them all."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        results[number] = (name, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, passed, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {name}: {detail}")
