"""Cache hierarchy, sparse NVM and the memory bus as seen by a snooping adversary.

The hierarchy is exclusive: a line lives in exactly one slot of one level.
Every slot of every level gets a global index ``N`` (private L1 banks first,
core by core, then L2, then L3), which is what the crash-time schemes use to
derive per-slot seed addresses and shadow-cache positions.
"""
from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

LINE = 64
KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB

ZERO_LINE = bytes(LINE)

USER_DATA = "user-data"
SECURITY_METADATA = "security-metadata"
TO_NVM = "to-NVM"
FROM_NVM = "from-NVM"


class SimulationError(Exception):
    """Base class for simulator errors."""


class AddressError(SimulationError, ValueError):
    pass


class CrashModelViolation(SimulationError):
    """An operation was attempted that the active eADR model does not power."""


def xor_line(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(LINE, "little")


def check_line(addr: int) -> None:
    if addr < 0 or addr % LINE:
        raise AddressError(f"address {addr:#x} is not 64-byte aligned")


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class LevelSpec:
    name: str
    capacity: int
    assoc: int
    private: bool = False

    @property
    def sets(self) -> int:
        return self.capacity // (self.assoc * LINE)

    @property
    def lines(self) -> int:
        return self.capacity // LINE


@dataclass(frozen=True)
class CacheGeometry:
    """Data-cache geometry; a private level is replicated once per core."""

    levels: tuple = (
        LevelSpec("L1d", 128 * KiB, 2, private=True),
        LevelSpec("L2", 1 * MiB, 8),
        LevelSpec("L3", 2 * MiB, 8),
    )
    cores: int = 8
    line_size: int = LINE

    def __post_init__(self):
        if self.line_size != LINE:
            raise ValueError("only 64-byte lines are modelled")
        if not 1 <= self.cores <= 64:
            raise ValueError(f"cores must be in 1..64, got {self.cores}")
        for lv in self.levels:
            if lv.assoc < 1 or lv.capacity <= 0 or lv.capacity % (lv.assoc * LINE):
                raise ValueError(f"{lv.name}: capacity {lv.capacity} not divisible by assoc*64")

    def copies(self, level: int) -> int:
        return self.cores if self.levels[level].private else 1

    def level_bytes(self, level: int) -> int:
        return self.levels[level].capacity * self.copies(level)

    @property
    def total_lines(self) -> int:
        return sum(self.level_bytes(i) // LINE for i in range(len(self.levels)))

    @property
    def total_bytes(self) -> int:
        return self.total_lines * LINE

    def halved(self) -> "CacheGeometry":
        """Same sets, half the ways: the user-visible part when pads occupy the rest."""
        levels = []
        for lv in self.levels:
            if lv.assoc < 2:
                raise ValueError(f"{lv.name} has a single way; cannot reserve half for pads")
            levels.append(LevelSpec(lv.name, lv.capacity // 2, lv.assoc // 2, lv.private))
        return CacheGeometry(tuple(levels), self.cores)

    def scaled(self, factor: float) -> "CacheGeometry":
        levels = tuple(
            LevelSpec(lv.name, int(lv.capacity * factor), lv.assoc, lv.private) for lv in self.levels
        )
        return CacheGeometry(levels, self.cores)


def slot_index_of(addr: int, geom: CacheGeometry, level: int) -> int:
    """Set index of a line-aligned address in ``level``."""
    check_line(addr)
    if not 0 <= level < len(geom.levels):
        raise IndexError(f"level {level} out of range (geometry has {len(geom.levels)})")
    return (addr // LINE) % geom.levels[level].sets


@dataclass(frozen=True)
class Bank:
    level: int
    core: Optional[int]
    sets: int
    assoc: int
    offset: int

    @property
    def size(self) -> int:
        return self.sets * self.assoc


@dataclass
class Victim:
    slot: int
    tag: int
    data: bytes
    dirty: bool


@dataclass
class CacheSlot:
    slot_index: int
    tag: Optional[int]
    dirty: bool
    lru_rank: int


class CacheHierarchy:
    """Exclusive, write-back, LRU data-cache hierarchy with a flat slot space.

    ``relocate(data, old_slot, new_slot)`` is called whenever a line moves
    between slots, so a scheme whose in-cache representation depends on the
    slot can re-encode it.
    """

    def __init__(self, geom: CacheGeometry, relocate: Optional[Callable[[bytes, int, int], bytes]] = None):
        self.geom = geom
        self.relocate = relocate
        self.banks: list[Bank] = []
        off = 0
        for li, lv in enumerate(geom.levels):
            for c in range(geom.copies(li)):
                self.banks.append(Bank(li, c if lv.private else None, lv.sets, lv.assoc, off))
                off += lv.sets * lv.assoc
        self.n_slots = off
        self._offsets = [b.offset for b in self.banks]
        self._level_banks = []
        for li in range(len(geom.levels)):
            self._level_banks.append([b for b in self.banks if b.level == li])
        self.tags: list[int] = [-1] * off
        self.data: list[Optional[bytes]] = [None] * off
        self.dirty: list[bool] = [False] * off
        self.stamp: list[int] = [0] * off
        self.where: dict[int, int] = {}
        self._tick = 0
        self.hits = [0] * len(geom.levels)
        self.misses = [0] * len(geom.levels)

    # -- addressing
    def bank_of(self, slot: int) -> Bank:
        return self.banks[bisect.bisect_right(self._offsets, slot) - 1]

    def _bank_for(self, level: int, core: int) -> Bank:
        banks = self._level_banks[level]
        return banks[core % len(banks)] if len(banks) > 1 else banks[0]

    def slot_position(self, slot: int) -> tuple[int, Optional[int], int, int]:
        """(level, core, set, way) of a global slot index."""
        b = self.bank_of(slot)
        local = slot - b.offset
        return b.level, b.core, local // b.assoc, local % b.assoc

    def slot_number(self, level: int, core: Optional[int], set_index: int, way: int) -> int:
        b = self._bank_for(level, core or 0)
        if not (0 <= set_index < b.sets and 0 <= way < b.assoc):
            raise IndexError("set/way out of range")
        return b.offset + set_index * b.assoc + way

    def locate(self, addr: int) -> Optional[int]:
        return self.where.get(addr)

    def slot(self, n: int) -> CacheSlot:
        tag = self.tags[n]
        return CacheSlot(n, None if tag < 0 else tag, self.dirty[n], self.stamp[n])

    # -- movement
    def _touch(self, n: int) -> None:
        self._tick += 1
        self.stamp[n] = self._tick

    def _take(self, n: int) -> Victim:
        v = Victim(n, self.tags[n], self.data[n], self.dirty[n])
        del self.where[v.tag]
        self.tags[n] = -1
        self.data[n] = None
        self.dirty[n] = False
        return v

    def _place(self, level: int, core: int, addr: int, data: bytes, dirty: bool,
               src_slot: Optional[int], out: list) -> int:
        b = self._bank_for(level, core)
        base = b.offset + ((addr // LINE) % b.sets) * b.assoc
        target = -1
        oldest = None
        for n in range(base, base + b.assoc):
            if self.tags[n] < 0:
                target = n
                break
            if oldest is None or self.stamp[n] < self.stamp[oldest]:
                oldest = n
        if target < 0:
            target = oldest
            v = self._take(target)
            if level + 1 < len(self.geom.levels):
                self._place(level + 1, core, v.tag, v.data, v.dirty, v.slot, out)
            else:
                out.append(v)
        if src_slot is not None and self.relocate is not None and data is not None:
            data = self.relocate(data, src_slot, target)
        self.tags[target] = addr
        self.data[target] = data
        self.dirty[target] = dirty
        self.where[addr] = target
        self._touch(target)
        return target

    def access(self, core: int, addr: int) -> tuple[Optional[int], Optional[int], list]:
        """Look ``addr`` up for ``core``.

        Returns ``(hit_level, slot, victims)``; ``hit_level`` is None on a miss.
        A hit below the core's L1 promotes the line into L1, which can push a
        line out of the last level; such lines are returned as victims.
        """
        n = self.where.get(addr)
        victims: list[Victim] = []
        if n is None:
            self.misses[-1] += 1
            for li in range(len(self.geom.levels) - 1):
                self.misses[li] += 1
            return None, None, victims
        b = self.bank_of(n)
        for li in range(b.level):
            self.misses[li] += 1
        self.hits[b.level] += 1
        if b.level == 0 and (b.core is None or b.core == core % self.geom.cores):
            self._touch(n)
            return 0, n, victims
        v = self._take(n)
        new = self._place(0, core, addr, v.data, v.dirty, n, victims)
        return b.level, new, victims

    def allocate(self, core: int, addr: int, data: bytes = ZERO_LINE, dirty: bool = False) -> tuple[int, list]:
        """Install a line that is not resident; returns (slot, victims)."""
        if addr in self.where:
            raise SimulationError(f"line {addr:#x} already resident")
        victims: list[Victim] = []
        n = self._place(0, core, addr, data, dirty, None, victims)
        return n, victims

    def install_at(self, n: int, addr: int, data: bytes, dirty: bool) -> None:
        """Put a line directly into slot ``n`` (crash recovery re-installation)."""
        if self.tags[n] >= 0:
            raise SimulationError(f"slot {n} occupied")
        if addr in self.where:
            raise SimulationError(f"line {addr:#x} already resident")
        b = self.bank_of(n)
        if (addr // LINE) % b.sets != (n - b.offset) // b.assoc:
            raise SimulationError(f"line {addr:#x} does not map to the set of slot {n}")
        self.tags[n] = addr
        self.data[n] = data
        self.dirty[n] = dirty
        self.where[addr] = n
        self._touch(n)

    def remove(self, addr: int) -> Optional[Victim]:
        n = self.where.get(addr)
        return None if n is None else self._take(n)

    def clear(self) -> None:
        """Drop all contents (power loss after the flush)."""
        n = self.n_slots
        self.tags = [-1] * n
        self.data = [None] * n
        self.dirty = [False] * n
        self.stamp = [0] * n
        self.where = {}

    def resident(self) -> Iterable[int]:
        return sorted(self.where.values())

    def dirty_count(self) -> int:
        return sum(1 for n in self.where.values() if self.dirty[n])

    def dirty_bytes_by_level(self) -> list[int]:
        out = [0] * len(self.geom.levels)
        for n in self.where.values():
            if self.dirty[n]:
                out[self.bank_of(n).level] += LINE
        return out


# ---------------------------------------------------------------- bus + NVM


@dataclass(frozen=True)
class BusEvent:
    direction: str
    addr: int
    payload: bytes
    step: int
    cls: str
    subject: int  # home address of the user line carried (== addr except shadow-cache traffic)
    seq: int = 0


@dataclass
class AdversaryTrace:
    events: list = field(default_factory=list)
    nvm_snapshots: dict = field(default_factory=dict)

    def user_events(self):
        return [e for e in self.events if e.cls == USER_DATA]

    def to_records(self):
        for e in self.events:
            yield {
                "seq": e.seq, "step": e.step, "dir": e.direction, "addr": e.addr,
                "subject": e.subject, "class": e.cls, "payload": e.payload.hex(),
            }

    @classmethod
    def from_records(cls, records):
        tr = cls()
        for r in records:
            tr.events.append(BusEvent(r["dir"], r["addr"], bytes.fromhex(r["payload"]), r["step"],
                                      r["class"], r["subject"], r["seq"]))
        return tr


@dataclass(frozen=True)
class NvmLayout:
    """Physical map: user data, seed-only window, counters, plaintext markers, shadow cache."""

    nvm_size: int
    cache_lines: int

    def __post_init__(self):
        if self.nvm_size <= 0 or self.nvm_size % (4 * KiB):
            raise ValueError("nvm_size must be a positive multiple of 4 KiB")

    @property
    def seed_window(self) -> tuple[int, int]:
        return self.nvm_size, self.nvm_size + self.cache_lines * LINE

    @property
    def counter_base(self) -> int:
        end = self.seed_window[1]
        return -(-end // (4 * KiB)) * (4 * KiB)

    @property
    def marker_base(self) -> int:
        return self.counter_base + self.nvm_size // LINE

    @property
    def shadow_base(self) -> int:
        return self.marker_base + self.nvm_size

    @property
    def shadow_tag_base(self) -> int:
        return self.shadow_base + self.cache_lines * LINE

    @property
    def end(self) -> int:
        return self.shadow_tag_base + self.cache_lines * LINE

    def counter_addr(self, region: int) -> int:
        return self.counter_base + (region // (4 * KiB)) * LINE

    def marker_addr(self, addr: int) -> int:
        return self.marker_base + addr

    def shadow_addr(self, n: int) -> int:
        return self.shadow_base + n * LINE

    def shadow_tag_addr(self, n: int) -> int:
        return self.shadow_tag_base + n * LINE

    def seed_addr(self, n: int) -> int:
        """Outside-the-memory-space address of cache slot ``n`` (seed input only)."""
        return self.nvm_size + n * LINE

    def is_user(self, addr: int) -> bool:
        return 0 <= addr < self.nvm_size

    def is_storage(self, addr: int) -> bool:
        return self.is_user(addr) or self.counter_base <= addr < self.end


class Nvm:
    """Sparse line-granular NVM; every read and write crosses the snooped bus."""

    def __init__(self, layout: NvmLayout, trace: Optional[AdversaryTrace] = None):
        self.layout = layout
        self.lines: dict[int, bytes] = {}
        self.trace = trace if trace is not None else AdversaryTrace()
        self.step = 0
        self.reads_allowed = True
        self.reads = 0
        self.writes = 0

    def _check(self, addr: int) -> None:
        check_line(addr)
        if not self.layout.is_storage(addr):
            raise AddressError(f"address {addr:#x} is not an NVM storage location")

    def _emit(self, direction, addr, payload, cls, subject):
        tr = self.trace
        tr.events.append(BusEvent(direction, addr, payload, self.step, cls,
                                  addr if subject is None else subject, len(tr.events)))

    def write(self, addr: int, payload: bytes, cls: str = USER_DATA, subject: Optional[int] = None) -> None:
        self._check(addr)
        if len(payload) != LINE:
            raise ValueError("payload must be 64 bytes")
        self.lines[addr] = payload
        self.writes += 1
        self._emit(TO_NVM, addr, payload, cls, subject)

    def read(self, addr: int, cls: str = USER_DATA, subject: Optional[int] = None) -> bytes:
        self._check(addr)
        if not self.reads_allowed:
            raise CrashModelViolation(f"NVM read of {addr:#x} while the crash model forbids reads")
        payload = self.lines.get(addr, ZERO_LINE)
        self.reads += 1
        self._emit(FROM_NVM, addr, payload, cls, subject)
        return payload

    def peek(self, addr: int) -> bytes:
        """Debug read: no bus event."""
        return self.lines.get(addr, ZERO_LINE)

    def stored_in(self, lo: int, hi: int) -> list[int]:
        return sorted(a for a in self.lines if lo <= a < hi)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in sorted(self.lines):
            h.update(a.to_bytes(8, "little"))
            h.update(self.lines[a])
        return h.hexdigest()

    def snapshot(self) -> None:
        self.trace.nvm_snapshots[self.step] = self.content_hash()


def nvm_write(nvm: Nvm, addr: int, payload: bytes, cls: str = USER_DATA) -> None:
    nvm.write(addr, payload, cls)


def nvm_read(nvm: Nvm, addr: int, cls: str = USER_DATA) -> bytes:
    return nvm.read(addr, cls)
