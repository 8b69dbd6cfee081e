"""Encryption schemes as state machines over the cache, the NVM and the CME engine.

Every scheme exposes the same surface: ``host_read``, ``host_write``,
``evict_writeback``, ``crash_flush(model)`` and ``recover``. What differs is
how a line is represented inside the cache, how the memory controller turns
it into bus traffic, and what happens when the power fails.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .cme import (
    DOMAIN_COTP, DOMAIN_CRASH_BBE, DOMAIN_RUNTIME, MINOR_MAX, REGION, CounterBlock, CounterCache, OtpEngine,
    SeedLog, bump_minor, region_of,
)
from .core_model import (
    GiB, KiB, LINE, SECURITY_METADATA, USER_DATA, ZERO_LINE, AdversaryTrace, AddressError, CacheGeometry,
    CacheHierarchy, Nvm, NvmLayout, SimulationError, Victim, check_line, xor_line,
)
from .eadr import EadrModel, model_allows
from .metrics import AccessRecord

DEFAULT_KEY = "000102030405060708090a0b0c0d0e0f"

SCHEME_IDS = ("baseline", "mc-cme", "eadr-cme", "bbe", "sepencr")
REFERENCE_IDS = ("discard",)


class IncompatibleModel(SimulationError):
    pass


class UnrecoverableState(SimulationError):
    pass


@dataclass(frozen=True)
class SystemConfig:
    geometry: CacheGeometry = field(default_factory=CacheGeometry)
    nvm_size: int = 16 * GiB
    counter_cache_bytes: int = 512 * KiB
    key: str = DEFAULT_KEY


def _tag_entry(addr: int) -> bytes:
    return b"\x01" + struct.pack("<Q", addr) + bytes(LINE - 9)


def _parse_tag_entry(raw: bytes) -> Optional[int]:
    if not any(raw):
        return None
    if raw[0] != 1 or any(raw[9:]):
        raise UnrecoverableState("corrupted shadow metadata entry")
    return struct.unpack_from("<Q", raw, 1)[0]


class Scheme:
    """Baseline: plaintext everywhere. Also the shared machinery of all schemes."""

    name = "baseline"
    uses_counters = False

    def __init__(self, config: SystemConfig = SystemConfig(), trace: Optional[AdversaryTrace] = None,
                 log: Optional[SeedLog] = None):
        self.config = config
        self.layout = NvmLayout(config.nvm_size, config.geometry.total_lines)
        self.nvm = Nvm(self.layout, trace)
        self.engine = OtpEngine(config.key, log)
        self._oracle = OtpEngine(config.key)  # side-effect-free pads for debug views
        self.counters = CounterCache(config.counter_cache_bytes, self.nvm)
        self.cache = CacheHierarchy(self.user_geometry(), self._relocate_fn())
        self.rec = AccessRecord()
        self._writes_at_start = 0
        self.overflows = 0
        self.crashed = False

    # -- configuration hooks
    def user_geometry(self) -> CacheGeometry:
        return self.config.geometry

    def _relocate_fn(self):
        return None

    @classmethod
    def check_model(cls, model) -> EadrModel:
        return EadrModel.parse(model)

    @property
    def trace(self) -> AdversaryTrace:
        return self.nvm.trace

    @property
    def log(self) -> SeedLog:
        return self.engine.log

    # -- in-cache representation (overridden by schemes that encrypt in cache)
    def _store(self, addr: int, slot: int, line: bytes) -> bytes:
        return line

    def _load(self, addr: int, slot: int, raw: bytes) -> bytes:
        return raw

    def _peek_decode(self, addr: int, slot: int, raw: bytes) -> bytes:
        return raw

    def _fill(self, addr: int, slot: int) -> bytes:
        return self.nvm.read(addr, USER_DATA)

    def _peek_home(self, addr: int) -> bytes:
        return self.nvm.peek(addr)

    # -- host interface
    def _check_user(self, addr: int) -> None:
        check_line(addr)
        if not self.layout.is_user(addr):
            raise AddressError(f"{addr:#x} is not a user-data address")
        if self.crashed:
            raise SimulationError("host access after a crash without recovery")

    def _begin(self, kind: str) -> AccessRecord:
        self.rec = AccessRecord(kind)
        self._writes_at_start = self.nvm.writes
        return self.rec

    def _end(self) -> None:
        self.rec.nvm_writes = self.nvm.writes - self._writes_at_start

    def _drain(self, victims) -> None:
        for v in victims:
            if v.dirty:
                self.evict_writeback(v)

    def host_write(self, core: int, addr: int, line: bytes) -> None:
        self._check_user(addr)
        if len(line) != LINE:
            raise ValueError("host writes are whole 64-byte lines")
        rec = self._begin("write")
        level, slot, victims = self.cache.access(core, addr)
        self._drain(victims)
        if slot is None:
            slot, victims = self.cache.allocate(core, addr)
            self._drain(victims)
        rec.hit_level = level
        self.cache.data[slot] = self._store(addr, slot, line)
        self.cache.dirty[slot] = True
        self._end()

    def host_read(self, core: int, addr: int) -> bytes:
        self._check_user(addr)
        rec = self._begin("read")
        level, slot, victims = self.cache.access(core, addr)
        self._drain(victims)
        if slot is None:
            slot, victims = self.cache.allocate(core, addr)
            self._drain(victims)
            self.cache.data[slot] = self._fill(addr, slot)
            rec.filled = True
        rec.hit_level = level
        out = self._load(addr, slot, self.cache.data[slot])
        self._end()
        return out

    def evict_writeback(self, victim: Victim) -> None:
        self.nvm.write(victim.tag, victim.data, USER_DATA)

    def flush_line(self, addr: int) -> bool:
        """Write a dirty resident line back and keep it cached clean (debug/CLWB)."""
        n = self.cache.locate(addr)
        if n is None or not self.cache.dirty[n]:
            return False
        self.evict_writeback(Victim(n, addr, self.cache.data[n], True))
        self.cache.dirty[n] = False
        return True

    # -- crash and recovery
    def crash_flush(self, model) -> None:
        model = self.check_model(model)
        self.nvm.reads_allowed = model_allows(model, "read")
        self.engine.compute_allowed = model_allows(model, "compute")
        try:
            self._flush(model)
            self.counters.flush()
        finally:
            self.nvm.reads_allowed = True
            self.engine.compute_allowed = True
        self._power_loss()

    def _flush(self, model: EadrModel) -> None:
        c = self.cache
        for n in range(c.n_slots):
            if c.dirty[n]:
                self.nvm.write(c.tags[n], c.data[n], USER_DATA)

    def _power_loss(self) -> None:
        self.cache.clear()
        self.counters.clear()
        self.crashed = True

    def recover(self) -> None:
        if not self.crashed:
            raise SimulationError("recover() without a preceding crash")
        self.crashed = False

    # -- debug views
    def peek(self, addr: int) -> bytes:
        """Plaintext of ``addr`` as the program would see it, with no side effects."""
        n = self.cache.locate(addr)
        if n is not None:
            return self._peek_decode(addr, n, self.cache.data[n])
        return self._peek_home(addr)

    def dirty_snapshot(self) -> dict:
        c = self.cache
        return {c.tags[n]: self._peek_decode(c.tags[n], n, c.data[n]) for n in c.resident() if c.dirty[n]}

    def raw_slot(self, n: int) -> Optional[bytes]:
        return self.cache.data[n]

    def registers(self) -> dict:
        return {}

    def snapshot_lines(self) -> list:
        """Diagnostic dump: registers, one hex line per occupied slot, then valid shadow entries."""
        c = self.cache
        out = [f"# scheme {self.name}"]
        for k, v in sorted(self.registers().items()):
            out.append(f"reg {k} {v}")
        for n in c.resident():
            out.append(f"slot {n} {c.tags[n]:#x} {'D' if c.dirty[n] else 'C'} {c.data[n].hex()}")
        lo, hi = self.layout.shadow_tag_base, self.layout.end
        for a in self.nvm.stored_in(lo, hi):
            tag = _parse_tag_entry(self.nvm.peek(a))
            if tag is not None:
                n = (a - lo) // LINE
                out.append(f"shadow {n} {tag:#x} {self.nvm.peek(self.layout.shadow_addr(n)).hex()}")
        return out


Baseline = Scheme


class McCme(Scheme):
    """Counter-mode encryption in the memory controller; the cache holds plaintext.

    At a crash the full CME path only runs when the battery powers reads and
    computation. Otherwise counter misses cannot be served and the engine is
    down, so dirty lines reach NVM in plaintext; a per-line marker records
    that so recovery can still read them.
    """

    name = "mc-cme"
    uses_counters = True

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.plain_lines: set = set()

    # -- counters
    def _counter_block(self, addr: int, critical: bool) -> CounterBlock:
        cb, hit = self.counters.lookup(region_of(addr))
        if not hit and critical:
            self.rec.counter_misses += 1
        return cb

    def _decrypt_home(self, addr: int, raw: bytes, cb: CounterBlock, engine: OtpEngine) -> bytes:
        major, minor = cb.counters((addr % REGION) // LINE)
        if major == 0 and minor == 0:
            return ZERO_LINE  # never encrypted: initial memory
        return xor_line(raw, engine.pad(DOMAIN_RUNTIME, addr, major, minor, "decrypt"))

    def _mc_read(self, addr: int) -> bytes:
        raw = self.nvm.read(addr, USER_DATA)
        if addr in self.plain_lines:
            return raw
        return self._decrypt_home(addr, raw, self._counter_block(addr, True), self.engine)

    def _fill(self, addr: int, slot: int) -> bytes:
        return self._store_fill(addr, slot, self._mc_read(addr))

    def _store_fill(self, addr: int, slot: int, plain: bytes) -> bytes:
        return plain

    def _peek_home(self, addr: int) -> bytes:
        raw = self.nvm.peek(addr)
        if addr in self.plain_lines:
            return raw
        return self._decrypt_home(addr, raw, self.counters.peek(region_of(addr)), self._oracle)

    def _bump(self, addr: int, critical: bool) -> CounterBlock:
        """Advance the line's counter, re-encrypting the region first on overflow."""
        cb = self._counter_block(addr, critical)
        idx = (addr % REGION) // LINE
        old = cb.copy() if cb.minors[idx] == MINOR_MAX else None
        lines = bump_minor(cb, idx)
        self.counters.mark_dirty(cb.base_addr)
        if lines is not None:
            self.overflows += 1
            self._reencrypt_region(old, cb, lines, skip=addr)
        return cb

    def _reencrypt_region(self, old: CounterBlock, new: CounterBlock, lines, skip: int) -> None:
        for a in lines:
            if a == skip:
                continue
            raw = self.nvm.read(a, USER_DATA)
            self.rec.sync_reads += 1
            plain = raw if a in self.plain_lines else self._decrypt_home(a, raw, old, self.engine)
            self._write_home(a, plain, new)

    def _write_home(self, addr: int, plain: bytes, cb: CounterBlock, cpad: Optional[bytes] = None) -> None:
        major, minor = cb.counters((addr % REGION) // LINE)
        mpad = self.engine.pad(DOMAIN_RUNTIME, addr, major, minor)
        if cpad is not None:
            mpad = xor_line(cpad, mpad)
        self.nvm.write(addr, xor_line(plain, mpad), USER_DATA)
        if addr in self.plain_lines:
            self.plain_lines.discard(addr)
            self.nvm.write(self.layout.marker_addr(addr), ZERO_LINE, SECURITY_METADATA)

    def evict_writeback(self, victim: Victim) -> None:
        self._write_home(victim.tag, victim.data, self._bump(victim.tag, False))

    def _flush(self, model: EadrModel) -> None:
        c = self.cache
        full_path = model_allows(model, "read") and model_allows(model, "compute")
        for n in range(c.n_slots):
            if not c.dirty[n]:
                continue
            if full_path:
                self.evict_writeback(Victim(n, c.tags[n], c.data[n], True))
            else:
                addr = c.tags[n]
                self.nvm.write(addr, self._peek_decode(addr, n, c.data[n]), USER_DATA)
                self.nvm.write(self.layout.marker_addr(addr), b"\x01" + bytes(LINE - 1), SECURITY_METADATA)

    def _power_loss(self) -> None:
        super()._power_loss()
        self.plain_lines = set()

    def recover(self) -> None:
        super().recover()
        lo = self.layout.marker_base
        for a in self.nvm.stored_in(lo, lo + self.layout.nvm_size):
            if self.nvm.read(a, SECURITY_METADATA)[0]:
                self.plain_lines.add(a - lo)


class Discard(McCme):
    """Reference mode: dirty lines are dropped at a crash (confidential, not persistent)."""

    name = "discard"

    def _flush(self, model: EadrModel) -> None:
        pass


class EadrCme(McCme):
    """The encryption engine moved into the cache: lines are ciphertext on chip."""

    name = "eadr-cme"

    def _store(self, addr: int, slot: int, line: bytes) -> bytes:
        cb = self._bump(addr, True)
        major, minor = cb.counters((addr % REGION) // LINE)
        return xor_line(line, self.engine.pad(DOMAIN_RUNTIME, addr, major, minor))

    def _load(self, addr: int, slot: int, raw: bytes) -> bytes:
        return self._decrypt_home(addr, raw, self._counter_block(addr, True), self.engine)

    def _peek_decode(self, addr: int, slot: int, raw: bytes) -> bytes:
        return self._decrypt_home(addr, raw, self.counters.peek(region_of(addr)), self._oracle)

    def _fill(self, addr: int, slot: int) -> bytes:
        return self.nvm.read(addr, USER_DATA)  # already ciphertext under the line's counters

    def _peek_home(self, addr: int) -> bytes:
        return self._decrypt_home(addr, self.nvm.peek(addr), self.counters.peek(region_of(addr)), self._oracle)

    def _reencrypt_region(self, old: CounterBlock, new: CounterBlock, lines, skip: int) -> None:
        for a in lines:
            if a == skip:
                continue
            n = self.cache.locate(a)
            if n is not None:
                raw = self.cache.data[n]
            else:
                raw = self.nvm.read(a, USER_DATA)
                self.rec.sync_reads += 1
            plain = self._decrypt_home(a, raw, old, self.engine)
            cipher = xor_line(plain, self.engine.pad(DOMAIN_RUNTIME, a, *new.counters((a % REGION) // LINE)))
            if n is not None:
                self.cache.data[n] = cipher
                if self.cache.dirty[n]:
                    continue  # home copy is stale and will be overwritten
            # a clean cached line and its home copy stay identical
            self.nvm.write(a, cipher, USER_DATA)

    def evict_writeback(self, victim: Victim) -> None:
        self.nvm.write(victim.tag, victim.data, USER_DATA)

    def _flush(self, model: EadrModel) -> None:
        Scheme._flush(self, model)


class _ShadowMixin:
    """Shadow cache in NVM: slot N of the cache is flushed to shadow entry N."""

    def _write_shadow(self, n: int, tag: int, payload: bytes) -> None:
        self.nvm.write(self.layout.shadow_addr(n), payload, USER_DATA, subject=tag)
        self.nvm.write(self.layout.shadow_tag_addr(n), _tag_entry(tag), SECURITY_METADATA)

    def _read_shadow_entries(self) -> list:
        """Valid (slot, home address, payload) entries, invalidating each one read.

        Only stored tag lines are visited: an absent line reads as invalid.
        """
        lay = self.layout
        out = []
        for a in self.nvm.stored_in(lay.shadow_tag_base, lay.end):
            tag = _parse_tag_entry(self.nvm.read(a, SECURITY_METADATA))
            if tag is None:
                continue
            n = (a - lay.shadow_tag_base) // LINE
            if n >= self.cache.n_slots or not lay.is_user(tag) or tag % LINE:
                raise UnrecoverableState(f"shadow entry {n} names an impossible line {tag:#x}")
            payload = self.nvm.read(lay.shadow_addr(n), USER_DATA, subject=tag)
            out.append((n, tag, payload))
        for n, _, _ in out:
            self.nvm.write(lay.shadow_tag_addr(n), ZERO_LINE, SECURITY_METADATA)
        return out

    def _reinstall(self, n: int, tag: int, raw: bytes) -> None:
        try:
            self.cache.install_at(n, tag, raw, True)
        except SimulationError as exc:
            raise UnrecoverableState(str(exc)) from exc


class Bbe(_ShadowMixin, McCme):
    """Battery-backed encryption: CME at run time, incr-counter pads at a crash."""

    name = "bbe"

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.incr_counter = 1  # non-volatile

    @classmethod
    def check_model(cls, model) -> EadrModel:
        model = EadrModel.parse(model)
        if not model_allows(model, "compute"):
            raise IncompatibleModel(
                "BBE needs the battery to power the AES engine and XOR gates at a crash; "
                f"the {model.value} model only allows writes")
        return model

    def _flush(self, model: EadrModel) -> None:
        c = self.cache
        base = self.incr_counter
        dirty = [n for n in range(c.n_slots) if c.dirty[n]]
        if dirty:
            pads = self.engine.pads(DOMAIN_CRASH_BBE, [self.layout.seed_addr(n) for n in dirty],
                                    [base + n for n in dirty])
            for n, pad in zip(dirty, pads):
                self._write_shadow(n, c.tags[n], xor_line(c.data[n], pad))
        # one counter value per enumerated slot, dirty or not
        self.incr_counter = base + c.n_slots

    def recover(self) -> None:
        super().recover()
        base = self.incr_counter - self.cache.n_slots
        entries = self._read_shadow_entries()
        if not entries:
            return
        pads = self.engine.pads(DOMAIN_CRASH_BBE, [self.layout.seed_addr(n) for n, _, _ in entries],
                                [base + n for n, _, _ in entries], purpose="decrypt")
        for (n, tag, payload), pad in zip(entries, pads):
            self._reinstall(n, tag, xor_line(payload, pad))

    def registers(self) -> dict:
        return {"incr_counter": self.incr_counter}


class Sepencr(_ShadowMixin, McCme):
    """Separate encryption: cached lines are always XORed with a per-slot C-OTP.

    Half of every level holds the C-OTPs, so user data sees half the ways.
    """

    name = "sepencr"

    def __init__(self, *a, **kw):
        self.crash_count = 1  # non-volatile
        self.cotp: list = []
        super().__init__(*a, **kw)
        self.cotp = self._gen_table(self.crash_count, "encrypt")

    def user_geometry(self) -> CacheGeometry:
        return self.config.geometry.halved()

    def _relocate_fn(self):
        def relocate(data, old, new):
            return xor_line(data, xor_line(self.cotp[old], self.cotp[new]))
        return relocate

    def _gen_table(self, count: int, purpose: str, slots=None) -> list:
        slots = range(self.cache.n_slots) if slots is None else slots
        return self.engine.pads(DOMAIN_COTP, [self.layout.seed_addr(n) for n in slots], count, 0, purpose)

    def _store(self, addr: int, slot: int, line: bytes) -> bytes:
        return xor_line(line, self.cotp[slot])

    def _load(self, addr: int, slot: int, raw: bytes) -> bytes:
        return xor_line(raw, self.cotp[slot])

    def _peek_decode(self, addr: int, slot: int, raw: bytes) -> bytes:
        return xor_line(raw, self.cotp[slot])

    def _store_fill(self, addr: int, slot: int, plain: bytes) -> bytes:
        return xor_line(plain, self.cotp[slot])

    def evict_writeback(self, victim: Victim) -> None:
        cb = self._bump(victim.tag, False)
        self._write_home(victim.tag, victim.data, cb, cpad=self.cotp[victim.slot])

    def _flush(self, model: EadrModel) -> None:
        c = self.cache
        for n in range(c.n_slots):
            if c.dirty[n]:
                self._write_shadow(n, c.tags[n], c.data[n])

    def _power_loss(self) -> None:
        super()._power_loss()
        self.cotp = []

    def recover(self) -> None:
        super().recover()
        entries = self._read_shadow_entries()
        old = self._gen_table(self.crash_count, "decrypt", [n for n, _, _ in entries]) if entries else []
        self.crash_count += 1
        self.cotp = self._gen_table(self.crash_count, "encrypt")
        for (n, tag, payload), pad in zip(entries, old):
            self._reinstall(n, tag, xor_line(xor_line(payload, pad), self.cotp[n]))

    def registers(self) -> dict:
        return {"crash_count": self.crash_count}


SCHEMES = {
    "baseline": Baseline,
    "mc-cme": McCme,
    "eadr-cme": EadrCme,
    "bbe": Bbe,
    "sepencr": Sepencr,
    "discard": Discard,
}

_ALIASES = {"eadrcme": "eadr-cme", "eadr_cme": "eadr-cme", "mccme": "mc-cme", "mc_cme": "mc-cme",
            "cme": "mc-cme"}


def scheme_id(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in SCHEMES:
        raise ValueError(f"unknown scheme {name!r}; expected one of {', '.join(SCHEME_IDS)}")
    return key


def make_scheme(name: str, config: SystemConfig = SystemConfig(), **kw) -> Scheme:
    return SCHEMES[scheme_id(name)](config, **kw)


def check_compatible(name: str, model) -> None:
    SCHEMES[scheme_id(name)].check_model(model)
