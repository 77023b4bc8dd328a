import pytest

from treeprune import fixtures


@pytest.fixture
def stumps():
    return fixtures.two_stumps()


@pytest.fixture(scope="session")
def informative():
    return fixtures.informative_ensemble()


@pytest.fixture(scope="session")
def sparse():
    return fixtures.sparse_relevance_ensemble()


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
