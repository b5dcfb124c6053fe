import pytest

from graspinfer import world

# criterion number -> (passed, title, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def reference_dataset():
    """The 1500-trial, seed-0 toy dataset shared by several suites."""
    return world.collect_dataset(1500, seed=0)


@pytest.fixture(scope="session")
def criterion():
    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (bool(passed), title, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status}: {title} | {detail}")
