import os
import sys
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from helpers import BUY, SELL, ev_row, make_stream
from lobbyte.codec import ADD, CANCEL, FILL, MODIFY

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def small_book_stream():
    # two-sided book, one modify, a partial then full fill, a cancel
    rows = [
        ev_row(ADD, 1, BUY, 1_000, 100.0, 2.0),
        ev_row(ADD, 2, SELL, 2_000, 101.0, 1.0),
        ev_row(ADD, 3, BUY, 3_000, 99.0, 5.0),
        ev_row(MODIFY, 3, BUY, 4_000, 99.5, 4.0),
        ev_row(FILL, 1, BUY, 5_000, 100.0, 1.0),
        ev_row(FILL, 1, BUY, 6_000, 100.0, 1.0),
        ev_row(CANCEL, 2, SELL, 7_000, 101.0, 1.0),
    ]
    return make_stream(rows)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
