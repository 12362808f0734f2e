import contextlib
import os
import random
import threading

import pytest
from hypothesis import HealthCheck, settings

from hedb.he_core import SecurityParams, keygen
from hedb.server import serve

settings.register_profile(
    "default",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    """Register one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def db_keys():
    """Database-profile keys at lambda=2 (deep enough for every query circuit)."""
    return keygen(SecurityParams.database(2), seed=1234)


@pytest.fixture(scope="session")
def boot_keys():
    """Smallest bootstrappable keys at lambda=2."""
    return keygen(SecurityParams.bootstrappable(2), seed=99)


@pytest.fixture
def rng():
    return random.Random(2024)


@contextlib.contextmanager
def running_server(data_dir, **kw):
    """Serve on an ephemeral loopback port in a background thread."""
    srv = serve(0, data_dir, **kw)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    host, port = srv.server_address[:2]
    try:
        yield srv, f"{host}:{port}"
    finally:
        srv.shutdown()
        srv.server_close()
        thread.join(5)
