import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    # runs must not pick up overrides from the calling shell
    monkeypatch.delenv("BLMPC_SEED", raising=False)
    monkeypatch.delenv("BLMPC_THREADS", raising=False)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
