import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import _acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_log.LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(_acceptance_log.LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
