import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vidtox.kernels import available_backends  # noqa: E402

BACKENDS = available_backends()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return BACKENDS[request.param]


def pytest_report_header(config):
    from vidtox import kernels

    return f"vidtox kernel backend: {kernels.BACKEND} (available: {', '.join(sorted(BACKENDS))})"


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        verdict, title, detail, cpu = results[n]
        terminalreporter.write_line(f"[{verdict}] criterion {n:>2}: {title} ({cpu:.1f}s cpu) {detail}")
