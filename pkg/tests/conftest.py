import pytest

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ABLATION_TABLES: dict[int, str] = {}


@pytest.fixture
def record():
    def _record(n, passed, detail=""):
        ACCEPTANCE[n] = (bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for seed, text in sorted(ABLATION_TABLES.items()):
        tr.write_line(f"ablation table, seed {seed} (MER %)")
        for line in text.splitlines():
            tr.write_line("  " + line)
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else ""))
