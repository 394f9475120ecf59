import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA_ROOT = Path(os.environ.get("ECOBA_DATA", ROOT / "data"))


def has_dataset(name: str) -> bool:
    return any((DATA_ROOT / name).glob("*idx1-ubyte*"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist():
    if not has_dataset("mnist"):
        pytest.skip(f"MNIST IDX files not found under {DATA_ROOT / 'mnist'}")
    from ecoba.dataset import load_dataset
    return load_dataset("mnist", DATA_ROOT, seed=0)


# acceptance results: criterion number -> [(ok, detail)], printed once per criterion
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        results = ACCEPTANCE[number]
        verdict = "PASS" if all(ok for ok, _ in results) else "FAIL"
        details = "; ".join(detail for _, detail in results)
        terminalreporter.write_line(f"criterion {number}: {verdict}  {details}")
