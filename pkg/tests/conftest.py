import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}
_N_CRITERIA = 10


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid
              for reps in terminalreporter.stats.values() for r in reps if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, _N_CRITERIA + 1):
        if k in _CRITERIA:
            ok, detail = _CRITERIA[k]
            terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k:2d}: FAIL  (not evaluated; test errored or was deselected)")
