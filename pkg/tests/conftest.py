import pytest
from hypothesis import HealthCheck, settings

from eadrsim.core_model import KiB, MiB, CacheGeometry, LevelSpec
from eadrsim.schemes import SystemConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# 2 cores x 1 KiB L1 (2-way), 2 KiB L2 (4-way), 4 KiB L3 (4-way): 128 slots
TINY_GEOMETRY = CacheGeometry(
    (LevelSpec("L1d", 1 * KiB, 2, private=True), LevelSpec("L2", 2 * KiB, 4), LevelSpec("L3", 4 * KiB, 4)),
    cores=2,
)
TINY = SystemConfig(geometry=TINY_GEOMETRY, nvm_size=1 * MiB, counter_cache_bytes=1 * KiB)


@pytest.fixture
def tiny():
    return TINY


def line(i: int) -> bytes:
    """A distinct nonzero 64-byte value."""
    return (i + 1).to_bytes(8, "little") * 8


_OUTCOMES = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_") and (report.when == "call" or report.failed):
        n = int(name.split("_")[2])
        if _OUTCOMES.get(n) != "failed":
            _OUTCOMES[n] = report.outcome


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.CRITERIA):
        name = mod.CRITERIA[n]
        if n not in _OUTCOMES:
            terminalreporter.write_line(f"criterion {n} [{name}]: NOT RUN")
            continue
        ok, detail = mod.RESULTS.get(n, (False, "did not complete"))
        ok = ok and _OUTCOMES[n] == "passed"
        terminalreporter.write_line(f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}")
