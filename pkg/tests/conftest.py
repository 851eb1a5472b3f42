import pytest

# criterion id -> (passed, detail); filled by the acceptance suite
CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(id, ok, detail)`` records one acceptance outcome; later
    calls for the same id can only turn a pass into a fail."""

    def record(cid: str, ok: bool, detail: str = "") -> bool:
        prev_ok, prev_detail = CRITERIA.get(cid, (True, ""))
        joined = "; ".join(d for d in (prev_detail, detail) if d)
        CRITERIA[cid] = (prev_ok and bool(ok), joined)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA, key=lambda c: (int(c.split(".")[0]), c)):
        ok, detail = CRITERIA[cid]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {cid}: {detail}")
