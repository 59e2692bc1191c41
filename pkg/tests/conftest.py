import time
from contextlib import contextmanager

import pytest

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, float, float, str]] = []


@contextmanager
def criterion(number: int, title: str, budget_s: float):
    """Time a block, record PASS/FAIL, and enforce the wall-clock budget."""
    start = time.perf_counter()
    detail = ""
    ok = False
    try:
        yield
        ok = True
    except BaseException as exc:
        detail = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        elapsed = time.perf_counter() - start
        if ok and elapsed >= budget_s:
            ok = False
            detail = f"over budget ({elapsed:.2f}s >= {budget_s}s)"
        ACCEPTANCE_RESULTS.append((number, title, ok, elapsed, budget_s, detail))
        print(_line(ACCEPTANCE_RESULTS[-1]))
    if elapsed >= budget_s:
        pytest.fail(detail)


def _line(row) -> str:
    number, title, ok, elapsed, budget, detail = row
    status = "PASS" if ok else "FAIL"
    tail = f"  [{detail}]" if detail else ""
    return f"{status}  criterion {number:>2}: {title}  ({elapsed:.2f}s / {budget:g}s){tail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for row in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(_line(row))
