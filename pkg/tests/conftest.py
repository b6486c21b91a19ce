import _helpers


def pytest_terminal_summary(terminalreporter):
    if not _helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_helpers.ACCEPTANCE):
        ok, title, detail = _helpers.ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
