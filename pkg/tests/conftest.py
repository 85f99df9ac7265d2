import warnings

import pytest


@pytest.fixture(autouse=True)
def _quiet_short_schedule_warning():
    # many tests use deliberately tiny noising chains; the under-noised
    # terminal-step warning is expected there
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="final alpha_bar")
        yield
