from __future__ import annotations

import pytest

from .runs import GOLDEN_MEAN, Run, make_run


@pytest.fixture(scope="session")
def full_shift_run() -> Run:
    return make_run()


@pytest.fixture(scope="session")
def quarter_run() -> Run:
    return make_run(target="1/4")


@pytest.fixture(scope="session")
def golden_run() -> Run:
    return make_run(**GOLDEN_MEAN)
