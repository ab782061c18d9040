import contextlib
import time

import pytest

_CRITERIA: dict[int, str] = {}


class _Record:
    detail = ""


@pytest.fixture
def criterion():
    """Context manager that logs one PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        rec = _Record()
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield rec
            status = "PASS"
        finally:
            line = f"{status}  criterion {number:>2} {title}: {rec.detail} [{time.perf_counter() - start:.1f}s]"
            _CRITERIA[number] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
