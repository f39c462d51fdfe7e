import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from boxtemplates.template import load_template_library  # noqa: E402


@pytest.fixture(scope="session")
def library():
    return load_template_library()


@pytest.fixture(scope="session")
def by_name(library):
    return {t.name: t for t in library}


# acceptance results, printed once at the end of the run
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
