def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines, which pytest captures for passing tests."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("CRITERION")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: s.split(":")[0].split()[1]):
            terminalreporter.write_line(ln)
