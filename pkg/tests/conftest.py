import pytest

from paramsos.config import load_fixture


@pytest.fixture(scope="session")
def fixture_config():
    return load_fixture()


@pytest.fixture(scope="session")
def fixture_cell(fixture_config):
    """The (alpha=0.02, c=1) fixture cell, certified once per session."""
    from paramsos.pipeline import certify_cell

    return certify_cell(fixture_config, 0.02, 1.0)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
