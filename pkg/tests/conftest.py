import contextlib

import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion as PASS or FAIL."""
    lines = request.config.stash[_KEY]

    @contextlib.contextmanager
    def record(number, title):
        info = {"detail": ""}
        try:
            yield info
        except BaseException:
            lines.append(f"criterion {number:>2}: FAIL  {title}  {info['detail']}".rstrip())
            raise
        lines.append(f"criterion {number:>2}: PASS  {title}  {info['detail']}".rstrip())

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
