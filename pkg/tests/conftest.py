from __future__ import annotations

from pathlib import Path

import pytest

from compass.taxonomy import load_mapping, load_taxonomy

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture(scope="session")
def mapping():
    return load_mapping()


@pytest.fixture(scope="session")
def minitrace_bytes():
    return (FIXTURES / "minitrace.json").read_bytes()
