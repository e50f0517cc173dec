ACCEPTANCE_LINES = []


def record_criterion(n, passed, detail):
    ACCEPTANCE_LINES.append((n, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status} criterion {n}: {detail}")
