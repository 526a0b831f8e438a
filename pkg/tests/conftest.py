import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    """Record the outcome line of an acceptance criterion."""
    _RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(_RESULTS[n])


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance-gate criteria")


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[n])
