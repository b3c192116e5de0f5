"""Replays the acceptance verdicts after the run, outside output capture."""

VERDICTS = []  # (criterion number, label, passed), appended by test_acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, label, ok in sorted(VERDICTS):
        terminalreporter.write_line(
            f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} - {label}"
        )
