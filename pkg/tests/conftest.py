import re

import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call ``criterion(n, title, checks)`` with ``checks`` a list of
    ``(label, passed, detail)``. A test that errors before recording is
    reported as FAIL.
    """
    n_holder = {}

    def record(n: int, title: str, checks: list[tuple[str, bool, str]]):
        ok = all(c[1] for c in checks)
        details = "; ".join(f"{'ok' if c[1] else 'FAILED'} {c[0]} ({c[2]})" for c in checks)
        _LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {details}"
        n_holder["n"] = n
        print(_LINES[n])
        return ok

    yield record
    if "n" not in n_holder:
        m = re.search(r"criterion_(\d+)", request.node.name)
        if m:
            n = int(m.group(1))
            _LINES[n] = f"[FAIL] criterion {n:2d}: {request.node.name} errored before reporting"


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
