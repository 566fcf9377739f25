"""Shared pytest plumbing: collect acceptance verdicts and print them in the
terminal summary, where they bypass output capture and survive `pytest | tee`."""

_verdicts = []


def record_verdict(line):
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
