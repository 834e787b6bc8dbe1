"""Shared test plumbing: acceptance-criterion reporting."""

# test_acceptance.py records one entry per criterion; the summary hook below
# prints them as a block so a run's verdict is readable at a glance.
ACCEPTANCE = {}


def record_criterion(number, title, passed):
    ACCEPTANCE[number] = (title, passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed = ACCEPTANCE[number]
        # None marks a conditional check whose inputs were not supplied
        verdict = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {number} [{verdict}] {title}")
