"""Shared pytest wiring for the suite.

The acceptance tests report one ``criterion NN PASS/FAIL`` verdict each.
Plain ``print`` output is swallowed by capture unless ``-s`` is given, so the
lines are also collected here and replayed in a dedicated section at the end
of every run.
"""

_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
