import pytest

_LINES: dict[int, str] = {}


class CriteriaLog:
    def record(self, number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        _LINES[number] = line
        print(line)


@pytest.fixture(scope="session")
def criteria():
    return CriteriaLog()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
