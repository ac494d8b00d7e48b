"""Shared pytest hooks: acceptance criteria report one PASS/FAIL line each."""

import pytest

_RESULTS: list[tuple[str, bool, str]] = []


class CriterionRecorder:
    def __init__(self, cid: str):
        self.cid = cid
        self.checks: list[tuple[str, bool]] = []

    def check(self, label: str, ok: bool) -> bool:
        self.checks.append((label, bool(ok)))
        return bool(ok)

    def finish(self) -> None:
        ok = all(flag for _, flag in self.checks)
        detail = "; ".join(f"{label}{'' if flag else ' [x]'}" for label, flag in self.checks)
        _RESULTS.append((self.cid, ok, detail))
        line = f"{'PASS' if ok else 'FAIL'}  {self.cid}: {detail}"
        print("\n" + line)
        failed = [label for label, flag in self.checks if not flag]
        assert not failed, f"{self.cid} failed: {failed}"


@pytest.fixture
def criterion(request):
    return CriterionRecorder(request.node.name.replace("test_", "", 1))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {cid}: {detail}")
