import pytest

# acceptance verdicts collected by tests/test_acceptance.py
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
