"""Crash injection under the eADR models and the three post-hoc audits."""
from __future__ import annotations

import json
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .cme import SeedLog
from .core_model import LINE, USER_DATA, ZERO_LINE, AdversaryTrace
from .eadr import EadrModel, model_allows
from .metrics import (
    EnergyTable, LatencyTable, RunStats, WriteQueue, account_access, crash_flush_energy_mj, recovery_time,
)
from .schemes import Scheme, SystemConfig, make_scheme, scheme_id
from .workloads import Op

__all__ = [
    "AuditReport", "EadrModel", "GroundTruth", "Simulator", "audit_confidentiality", "audit_pad_uniqueness",
    "audit_persistence", "expected_outcome", "inject_crash", "model_allows", "run_with_crashes",
]


class GroundTruth:
    """Independent interpreter of the op trace: address -> plaintext history."""

    def __init__(self):
        self.current: dict = {}
        self.first_written: dict = {}  # (addr, value) -> earliest op index
        self.history: dict = {}

    def apply(self, step: int, op: Op) -> Optional[bytes]:
        if op.kind == "W":
            self.current[op.addr] = op.value
            self.first_written.setdefault((op.addr, op.value), step)
            self.history.setdefault(op.addr, []).append(step)
            return None
        return self.current.get(op.addr, ZERO_LINE)

    def read(self, addr: int) -> bytes:
        return self.current.get(addr, ZERO_LINE)

    def held_before(self, addr: int, value: bytes, step: int) -> bool:
        """Whether ``addr`` held ``value`` as plaintext at some point before op ``step``."""
        first = self.first_written.get((addr, value))
        return first is not None and first < step

    @classmethod
    def replay(cls, ops: Iterable[Op], stop: Optional[int] = None) -> "GroundTruth":
        gt = cls()
        for i, op in enumerate(ops):
            if stop is not None and i >= stop:
                break
            gt.apply(i, op)
        return gt


@dataclass
class AuditReport:
    confidentiality_violations: list = field(default_factory=list)
    duplicate_seeds: list = field(default_factory=list)
    persistence_mismatches: list = field(default_factory=list)

    @property
    def confidential(self) -> bool:
        return not self.confidentiality_violations

    @property
    def unique_pads(self) -> bool:
        return not self.duplicate_seeds

    @property
    def persistent(self) -> bool:
        return not self.persistence_mismatches

    @property
    def passed(self) -> bool:
        return self.confidential and self.unique_pads and self.persistent

    def to_dict(self, first_k: int = 10) -> dict:
        def hexify(rows):
            out = []
            for row in rows[:first_k]:
                out.append([x.hex() if isinstance(x, bytes) else x for x in row] if isinstance(row, tuple) else row)
            return out
        return {
            "passed": self.passed,
            "counts": {
                "confidentiality_violations": len(self.confidentiality_violations),
                "duplicate_seeds": len(self.duplicate_seeds),
                "persistence_mismatches": len(self.persistence_mismatches),
            },
            "confidentiality_violations": hexify(self.confidentiality_violations),
            "duplicate_seeds": self.duplicate_seeds[:first_k],
            "persistence_mismatches": hexify(self.persistence_mismatches),
        }

    def to_json(self, first_k: int = 10, **extra) -> str:
        d = dict(extra)
        d.update(self.to_dict(first_k))
        return json.dumps(d, indent=2, sort_keys=True)


def audit_confidentiality(trace: AdversaryTrace, truth: GroundTruth) -> list:
    """User-data bus payloads equal to a plaintext their line has held.

    Matching any earlier plaintext of the line (not only the latest) also
    catches stale copies leaking. All-zero payloads are exempt.
    """
    out = []
    for e in trace.events:
        if e.cls != USER_DATA or e.payload == ZERO_LINE:
            continue
        if truth.held_before(e.subject, e.payload, e.step):
            out.append((e.step, e.subject, e.payload))
    return out


def audit_pad_uniqueness(log) -> list:
    """Seed blocks that produced more than one encryption pad (hex)."""
    arr = log.array("encrypt") if isinstance(log, SeedLog) else np.asarray(log, dtype=np.uint8)
    if len(arr) == 0:
        return []
    words = np.ascontiguousarray(arr, dtype=np.uint8).view(np.uint64).reshape(-1, 2)
    order = np.lexsort((words[:, 1], words[:, 0]))
    w = words[order]
    same = (w[1:] == w[:-1]).all(axis=1)
    if not same.any():
        return []
    dup_rows = w[1:][same]
    return sorted({row.tobytes().hex() for row in dup_rows})


def audit_persistence(pre_crash: Mapping[int, bytes], truth: Mapping[int, bytes],
                      read: Callable[[int], bytes]) -> list:
    """Dirty lines from before the crash, then every other known line, must read back bit-exact."""
    out = []
    for addr in sorted(pre_crash):
        got = read(addr)
        if got != pre_crash[addr]:
            out.append((addr, pre_crash[addr], got))
    for addr in sorted(truth):
        if addr in pre_crash:
            continue
        got = read(addr)
        if got != truth[addr]:
            out.append((addr, truth[addr], got))
    return out


def expected_outcome(scheme: str, model) -> dict:
    """Which audits a (scheme, model) pair is designed to pass."""
    scheme, model = scheme_id(scheme), EadrModel.parse(model)
    secure = {
        "baseline": False,
        "mc-cme": model is EadrModel.ALL_OPERATION,
        "eadr-cme": True,
        "bbe": True,
        "sepencr": True,
        "discard": True,
    }[scheme]
    return {"confidential": secure, "unique_pads": True, "persistent": scheme != "discard"}


class Simulator:
    """One scheme instance driven by an op trace, with a ground-truth shadow."""

    def __init__(self, scheme: str, model="write-only", config: SystemConfig = SystemConfig(),
                 latencies: LatencyTable = LatencyTable(), energies: EnergyTable = EnergyTable(),
                 scheme_obj: Optional[Scheme] = None):
        self.scheme_name = scheme_id(scheme)
        self.model = EadrModel.parse(model)
        self.scheme = scheme_obj if scheme_obj is not None else make_scheme(self.scheme_name, config)
        self.scheme.check_model(self.model)
        self.config = config
        self.latencies = latencies
        self.energies = energies
        self.truth = GroundTruth()
        self.stats = RunStats()
        self.wq = WriteQueue(latencies.write_queue_entries, latencies.nvm_write_cycles)
        self.pos = 0
        self.persistence: list = []

    def step(self, op: Op) -> Optional[bytes]:
        s = self.scheme
        s.nvm.step = self.pos
        expected = self.truth.apply(self.pos, op)
        if op.kind == "W":
            s.host_write(op.core, op.addr, op.value)
            got = None
        else:
            got = s.host_read(op.core, op.addr)
            if got != expected:
                self.persistence.append((op.addr, expected, got))
        account_access(self.stats, s.rec, self.scheme_name, self.latencies, self.wq)
        self.pos += 1
        return got

    def run(self, ops: Sequence[Op], stop: Optional[int] = None) -> list:
        stop = len(ops) if stop is None else stop
        reads = []
        while self.pos < stop:
            r = self.step(ops[self.pos])
            if r is not None:
                reads.append(r)
        return reads

    def crash(self, recover: bool = True) -> list:
        """Crash now; returns persistence mismatches after recovery (if recovering)."""
        s = self.scheme
        s.nvm.step = self.pos
        pre = s.dirty_snapshot()
        dirty_levels = s.cache.dirty_bytes_by_level()
        counter_bytes = len(s.counters.dirty) * LINE
        encrypts = self.scheme_name == "bbe" or (
            self.scheme_name == "mc-cme" and self.model is EadrModel.ALL_OPERATION)
        s.crash_flush(self.model)
        s.nvm.snapshot()
        self.stats.crashes += 1
        self.stats.crash_energy_mj += crash_flush_energy_mj(self.scheme_name, dirty_levels, counter_bytes,
                                                            self.energies, encrypts)
        if not recover:
            return []
        s.recover()
        self.stats.recovery_seconds += recovery_time(self.scheme_name, self.config.geometry.total_bytes)
        mism = audit_persistence(pre, self.truth.current, s.peek)
        self.persistence.extend(mism)
        return mism

    def finish(self) -> RunStats:
        c = self.scheme.cache
        st = self.stats
        st.hits = list(c.hits)
        st.misses = list(c.misses)
        st.nvm_reads = self.scheme.nvm.reads
        st.nvm_writes = self.scheme.nvm.writes
        st.bus_bytes = LINE * len(self.scheme.trace.events)
        st.counter_hits = self.scheme.counters.hits
        st.counter_misses = self.scheme.counters.misses
        st.overflows = self.scheme.overflows
        return st

    def report(self) -> AuditReport:
        return AuditReport(
            audit_confidentiality(self.scheme.trace, self.truth),
            audit_pad_uniqueness(self.scheme.log),
            list(self.persistence),
        )


def inject_crash(sim: Simulator, ops: Sequence[Op], at_step: int, recover: bool = True) -> list:
    """Run ``ops[:at_step]`` then crash; ``at_step == 0`` crashes before any op."""
    if not 0 <= at_step <= len(ops):
        raise ValueError(f"crash step {at_step} outside trace of length {len(ops)}")
    sim.run(ops, at_step)
    return sim.crash(recover)


@dataclass
class RunResult:
    scheme: str
    model: str
    stats: RunStats
    report: AuditReport
    sim: Simulator


def run_with_crashes(scheme: str, model, ops: Sequence[Op], crash_points: Iterable[int] = (),
                     config: SystemConfig = SystemConfig(), latencies: LatencyTable = LatencyTable(),
                     energies: EnergyTable = EnergyTable(), verify_end: bool = True) -> RunResult:
    """Run a whole trace, crashing and recovering at each point, then audit everything."""
    sim = Simulator(scheme, model, config, latencies, energies)
    for k in sorted(set(crash_points)):
        inject_crash(sim, ops, k)
    sim.run(ops)
    if verify_end:
        sim.persistence.extend(audit_persistence({}, sim.truth.current, sim.scheme.peek))
    return RunResult(sim.scheme_name, sim.model.value, sim.finish(), sim.report(), sim)
