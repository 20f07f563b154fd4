import pytest

from oracles import cached_sequence

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    n = props.get("criterion")
    if n is None:
        return
    if hasattr(report, "wasxfail"):
        status = "FAIL (expected, see notes)"
    elif report.passed:
        status = "PASS"
    elif report.skipped:
        status = "SKIP"
    else:
        status = "FAIL"
    _CRITERIA[n] = (status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        line = f"criterion {n}: {status}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(record_property):
    """``criterion(n, detail)`` tags the running test for the summary table."""

    def tag(n, detail=""):
        record_property("criterion", n)
        record_property("detail", detail)

    return tag


@pytest.fixture(scope="session")
def excited_seq():
    """Noiseless excited motion, identity depth affine."""
    return cached_sequence(kind="excited", duration=0.8, seed=3)


@pytest.fixture(scope="session")
def hover_seq():
    return cached_sequence(kind="hover", duration=0.6, seed=42)
