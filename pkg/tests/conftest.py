import re

ACCEPTANCE = "test_acceptance.py::"


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.when != "call" or ACCEPTANCE not in rep.nodeid:
                continue
            m = re.search(r"test_criterion_(\d+)_(\w+)", rep.nodeid)
            if not m:
                continue
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(m.group(1)), f"criterion {int(m.group(1)):2d} {m.group(2):<24} "
                                            f"{'PASS' if rep.passed else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
