"""Cycle, crash-energy and recovery-time accounting."""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .core_model import LINE, MiB, CacheGeometry

MC_DECRYPT_SCHEMES = ("mc-cme", "bbe", "sepencr", "discard")


@dataclass(frozen=True)
class LatencyTable:
    l1_hit: int = 2
    l2_hit: int = 12
    l3_hit: int = 36
    t_rcd_ns: float = 48.0
    t_cl_ns: float = 15.0
    t_cwd_ns: float = 13.0
    t_wr_ns: float = 300.0
    t_faw_ns: float = 50.0  # recorded, not used by the flat model
    t_wtr_ns: float = 7.5  # recorded, not used by the flat model
    otp_gen_cycles: int = 80
    xor_cycles: int = 1
    cpu_clock_ghz: float = 2.0
    write_queue_entries: int = 64

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"latency {k} must be non-negative")

    @property
    def nvm_read_ns(self) -> float:
        return self.t_rcd_ns + self.t_cl_ns

    @property
    def nvm_write_ns(self) -> float:
        return self.t_cwd_ns + self.t_wr_ns

    @property
    def nvm_read_cycles(self) -> int:
        return round(self.nvm_read_ns * self.cpu_clock_ghz)

    @property
    def nvm_write_cycles(self) -> int:
        return round(self.nvm_write_ns * self.cpu_clock_ghz)

    def hit_cycles(self, level: int) -> int:
        return (self.l1_hit, self.l2_hit, self.l3_hit)[min(level, 2)]


@dataclass(frozen=True)
class EnergyTable:
    flush_l1_nj_per_byte: float = 11.839
    flush_l2_nj_per_byte: float = 11.228
    flush_l3_nj_per_byte: float = 11.228
    flush_mc_nj_per_byte: float = 11.228
    xor_fj_per_byte: float = 800.0
    aes_pj_per_byte: float = 192.0

    def level_rate(self, level: int) -> float:
        return (self.flush_l1_nj_per_byte, self.flush_l2_nj_per_byte, self.flush_l3_nj_per_byte)[min(level, 2)]


@dataclass
class AccessRecord:
    """What one host access did, as reported by the scheme."""

    kind: str = "read"
    hit_level: Optional[int] = None
    filled: bool = False
    counter_misses: int = 0
    sync_reads: int = 0
    nvm_writes: int = 0


@dataclass
class RunStats:
    total_cycles: int = 0
    ops: int = 0
    hits: list = field(default_factory=list)
    misses: list = field(default_factory=list)
    bus_bytes: int = 0
    nvm_reads: int = 0
    nvm_writes: int = 0
    counter_hits: int = 0
    counter_misses: int = 0
    overflows: int = 0
    write_stall_cycles: int = 0
    crashes: int = 0
    crash_energy_mj: float = 0.0
    recovery_seconds: float = 0.0

    def merge(self, other: "RunStats") -> "RunStats":
        out = RunStats()
        for k in ("total_cycles", "ops", "bus_bytes", "nvm_reads", "nvm_writes", "counter_hits",
                  "counter_misses", "overflows", "write_stall_cycles", "crashes",
                  "crash_energy_mj", "recovery_seconds"):
            setattr(out, k, getattr(self, k) + getattr(other, k))
        n = max(len(self.hits), len(other.hits))
        pad = lambda xs: list(xs) + [0] * (n - len(xs))
        out.hits = [a + b for a, b in zip(pad(self.hits), pad(other.hits))]
        out.misses = [a + b for a, b in zip(pad(self.misses), pad(other.misses))]
        return out


class WriteQueue:
    """64-entry NVM write queue drained one write at a time."""

    def __init__(self, entries: int, service: int):
        self.entries = entries
        self.service = service
        self.q: deque = deque()

    def push(self, now: int) -> int:
        q = self.q
        while q and q[0] <= now:
            q.popleft()
        stall = 0
        if len(q) >= self.entries:
            stall = q[0] - now
            now = q.popleft()
        start = max(now, q[-1]) if q else now
        q.append(start + self.service)
        return stall


def account_access(stats: RunStats, rec: AccessRecord, scheme: str, lat: LatencyTable,
                   wq: Optional[WriteQueue] = None) -> int:
    """Charge one host access and return the cycles added.

    In-cache encryption pays a pad generation on every access; Sepencr pays an
    XOR. Fills that decrypt at the memory controller overlap pad generation
    with the NVM read, so they cost the longer of the two.
    """
    if rec.hit_level is None:
        c = lat.l3_hit
        if rec.filled:
            if scheme in MC_DECRYPT_SCHEMES:
                c += max(lat.nvm_read_cycles, lat.otp_gen_cycles)
            else:
                c += lat.nvm_read_cycles
    else:
        c = lat.hit_cycles(rec.hit_level)
    c += (rec.counter_misses + rec.sync_reads) * lat.nvm_read_cycles
    if scheme == "eadr-cme":
        c += lat.otp_gen_cycles
    elif scheme == "sepencr":
        c += lat.xor_cycles
    if rec.nvm_writes:
        if wq is None:
            wq = WriteQueue(lat.write_queue_entries, lat.nvm_write_cycles)
        for _ in range(rec.nvm_writes):
            stall = wq.push(stats.total_cycles + c)
            stats.write_stall_cycles += stall
            c += stall
    stats.total_cycles += c
    stats.ops += 1
    return c


# ---------------------------------------------------------------- crash energy


def full_dirty_bytes(scheme: str, geometry: CacheGeometry) -> list[int]:
    """Per-level bytes flushed when every user-visible line is dirty."""
    g = geometry.halved() if scheme == "sepencr" else geometry
    return [g.level_bytes(i) for i in range(len(g.levels))]


def crash_flush_energy_mj(scheme: str, dirty_bytes_by_level: Sequence[int], counter_bytes: int = 0,
                          energy: EnergyTable = EnergyTable(), encrypts_at_crash: Optional[bool] = None) -> float:
    flushed = sum(dirty_bytes_by_level)
    nj = sum(b * energy.level_rate(i) for i, b in enumerate(dirty_bytes_by_level))
    nj += counter_bytes * energy.flush_mc_nj_per_byte
    if encrypts_at_crash is None:
        encrypts_at_crash = scheme == "bbe"
    pj = 0.0
    if encrypts_at_crash:
        pj = flushed * energy.aes_pj_per_byte + flushed * energy.xor_fj_per_byte / 1000.0
    return nj * 1e-6 + pj * 1e-9


def energy_crash_flush(scheme: str, geometry: CacheGeometry = CacheGeometry(),
                       dirty_bytes_by_level: Optional[Sequence[int]] = None,
                       energies: EnergyTable = EnergyTable(), counter_cache_bytes: int = 512 * 1024) -> float:
    """Crash-flush energy in mJ; with no dirty profile given, the whole cache is dirty."""
    if dirty_bytes_by_level is None:
        dirty_bytes_by_level = full_dirty_bytes(scheme, geometry)
    counter = 0 if scheme == "baseline" else counter_cache_bytes
    return crash_flush_energy_mj(scheme, dirty_bytes_by_level, counter, energies)


NVM_LINE_READ_NS = 200.0


def recovery_time(scheme: str, data_cache_bytes: int) -> float:
    """Seconds to reload the flushed cache image after a crash."""
    lines = data_cache_bytes / LINE
    if scheme == "bbe":
        return lines * NVM_LINE_READ_NS * 1e-9
    if scheme == "sepencr":
        return lines * NVM_LINE_READ_NS * 1e-9 / 2
    return 0.0


RECOVERY_SIZES_MIB = (2, 4, 8, 16, 32)


def recovery_curve(sizes_mib: Sequence[int] = RECOVERY_SIZES_MIB) -> list[dict]:
    return [
        {"cache_mib": s, "bbe_s": recovery_time("bbe", s * MiB), "sepencr_s": recovery_time("sepencr", s * MiB)}
        for s in sizes_mib
    ]
