import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(acceptance_log.RESULTS, key=_criterion_order):
            terminalreporter.write_line(line)


def _criterion_order(line: str):
    label = line.split(":", 1)[0].split()[-1]
    return (int("".join(ch for ch in label if ch.isdigit()) or 0), label)
