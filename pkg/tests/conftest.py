"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

CRITERIA = {}


def record(number, title, passed, detail):
    CRITERIA[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}: {detail}")
