import os

import numpy as np
import pytest
from hypothesis import settings

from tacgen.utils import setup_torch

setup_torch()
settings.register_profile("tacgen", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("tacgen")

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    print(line)
    ACCEPTANCE.append((criterion, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cache_dir():
    path = os.environ.get("TACGEN_CACHE") or os.path.join(os.path.dirname(__file__), os.pardir, ".cache")
    os.makedirs(path, exist_ok=True)
    return path
