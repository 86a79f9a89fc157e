import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# filled by tests/test_acceptance.py: criterion id -> (passed, detail)
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def acceptance_record():
    def record(cid: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_RESULTS[cid] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS, key=lambda c: int(c.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {cid}: {detail}")
