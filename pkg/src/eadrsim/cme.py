"""Counter-mode encryption: split counters, seeds, OTP generation and the counter cache."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .core_model import LINE, SECURITY_METADATA, CrashModelViolation, KiB, Nvm, NvmLayout, ZERO_LINE, xor_line

REGION = 4 * KiB
LINES_PER_REGION = 64
MINOR_MAX = 127

DOMAIN_RUNTIME = 0  # M-OTP at the memory controller
DOMAIN_CRASH_BBE = 1
DOMAIN_COTP = 2
DOMAIN_NAMES = {"runtime-M": DOMAIN_RUNTIME, "crash-BBE": DOMAIN_CRASH_BBE, "startup-COTP": DOMAIN_COTP}

ADDR_LIMIT = 1 << 54  # 48-bit line number in the seed


@dataclass(frozen=True)
class Seed:
    domain: int
    addr: int
    major: int
    minor: int = 0

    def _tail(self) -> bytes:
        if not 0 <= self.domain < 4:
            raise ValueError("domain is a 2-bit field")
        if not 0 <= self.minor < 256 or not 0 <= self.major < 1 << 64:
            raise ValueError("counter out of range")
        if self.addr % LINE or not 0 <= self.addr < ADDR_LIMIT:
            raise ValueError(f"seed address {self.addr:#x} must be line aligned and below 2**54")
        return struct.pack(">BQ", self.minor, self.major) + (self.addr // LINE).to_bytes(6, "big")

    def block(self, block_index: int) -> bytes:
        """128-bit cipher input for one 16-byte quarter of the pad.

        Layout (big-endian): domain:2 | block:2 | 0:4 | minor:8 | major:64 | line:48.
        """
        if not 0 <= block_index < 4:
            raise ValueError("block index is a 2-bit field")
        return bytes([(self.domain << 6) | (block_index << 4)]) + self._tail()

    def blocks(self) -> bytes:
        tail = self._tail()
        d = self.domain << 6
        return b"".join(bytes([d | (i << 4)]) + tail for i in range(4))


def seed_blocks_batch(domain: int, addrs, majors, minor: int = 0) -> np.ndarray:
    """Vectorised ``Seed.blocks`` for many pads; returns an (n*4, 16) uint8 array."""
    addrs = np.asarray(addrs, dtype=np.uint64)
    majors = np.broadcast_to(np.asarray(majors, dtype=np.uint64), addrs.shape)
    n = addrs.shape[0]
    if n and (int(addrs.max()) >= ADDR_LIMIT or np.any(addrs % np.uint64(LINE))):
        raise ValueError("seed addresses must be line aligned and below 2**54")
    out = np.zeros((n, 4, 16), dtype=np.uint8)
    out[:, :, 0] = (domain << 6) | (np.arange(4, dtype=np.uint8) << 4)
    out[:, :, 1] = minor
    maj = majors.astype(">u8").view(np.uint8).reshape(n, 8)
    out[:, :, 2:10] = maj[:, None, :]
    lines = (addrs // np.uint64(LINE)).astype(">u8").view(np.uint8).reshape(n, 8)[:, 2:]
    out[:, :, 10:16] = lines[:, None, :]
    return out.reshape(n * 4, 16)


@dataclass
class SeedLog:
    """Every seed block fed to the cipher, split by whether the pad encrypted data."""

    encrypt: list = field(default_factory=list)
    decrypt: list = field(default_factory=list)

    def add(self, blocks: np.ndarray, purpose: str) -> None:
        (self.encrypt if purpose == "encrypt" else self.decrypt).append(blocks)

    def array(self, purpose: str = "encrypt") -> np.ndarray:
        chunks = self.encrypt if purpose == "encrypt" else self.decrypt
        if not chunks:
            return np.zeros((0, 16), dtype=np.uint8)
        return np.concatenate(chunks)

    def __len__(self):
        return sum(len(c) for c in self.encrypt) + sum(len(c) for c in self.decrypt)

    def export(self, path, purpose: str = "encrypt") -> None:
        with open(path, "w") as fh:
            for row in self.array(purpose):
                fh.write(row.tobytes().hex() + "\n")

    @staticmethod
    def load(path) -> np.ndarray:
        with open(path) as fh:
            rows = [bytes.fromhex(x.strip()) for x in fh if x.strip()]
        if not rows:
            return np.zeros((0, 16), dtype=np.uint8)
        return np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(-1, 16)


@dataclass(frozen=True)
class Otp:
    pad: bytes


def parse_key(key) -> bytes:
    if isinstance(key, str):
        key = bytes.fromhex(key)
    if len(key) != 16:
        raise ValueError("key must be 128 bits (32 hex characters)")
    return key


class OtpEngine:
    """AES-128 pad generator with a seed log and a power switch for crash models."""

    def __init__(self, key, log: Optional[SeedLog] = None):
        self.key = parse_key(key)
        self._enc = Cipher(algorithms.AES(self.key), modes.ECB()).encryptor()
        self.log = log if log is not None else SeedLog()
        self.compute_allowed = True
        self.calls = 0

    def _guard(self):
        if not self.compute_allowed:
            raise CrashModelViolation("pad generation while the crash model forbids computation")

    def encrypt_block(self, block: bytes) -> bytes:
        """Raw cipher on one 16-byte block (not logged; for test vectors)."""
        if len(block) != 16:
            raise ValueError("cipher blocks are 16 bytes")
        return self._enc.update(block)

    def gen_otp(self, seed: Seed, purpose: str = "encrypt") -> Otp:
        self._guard()
        raw = seed.blocks()
        self.log.add(np.frombuffer(raw, dtype=np.uint8).reshape(4, 16), purpose)
        self.calls += 1
        return Otp(self._enc.update(raw))

    def pad(self, domain: int, addr: int, major: int, minor: int = 0, purpose: str = "encrypt") -> bytes:
        return self.gen_otp(Seed(domain, addr, major, minor), purpose).pad

    def pads(self, domain: int, addrs, majors, minor: int = 0, purpose: str = "encrypt") -> list[bytes]:
        self._guard()
        blocks = seed_blocks_batch(domain, addrs, majors, minor)
        self.log.add(blocks, purpose)
        out = self._enc.update(blocks.tobytes())
        self.calls += len(blocks) // 4
        return [out[i:i + LINE] for i in range(0, len(out), LINE)]


def gen_otp(seed: Seed, key, log: Optional[SeedLog] = None) -> Otp:
    return OtpEngine(key, log).gen_otp(seed)


# ---------------------------------------------------------------- counters


@dataclass
class CounterBlock:
    base_addr: int
    major: int = 0
    minors: list = field(default_factory=lambda: [0] * LINES_PER_REGION)

    def counters(self, line_idx: int) -> tuple[int, int]:
        return self.major, self.minors[line_idx]

    def copy(self) -> "CounterBlock":
        return CounterBlock(self.base_addr, self.major, list(self.minors))

    def serialize(self) -> bytes:
        packed = 0
        for i, m in enumerate(self.minors):
            packed |= (m & 0x7F) << (7 * i)
        return struct.pack("<Q", self.major) + packed.to_bytes(56, "little")

    @classmethod
    def deserialize(cls, base_addr: int, raw: bytes) -> "CounterBlock":
        if len(raw) != LINE:
            raise ValueError("counter block must be 64 bytes")
        major = struct.unpack_from("<Q", raw)[0]
        packed = int.from_bytes(raw[8:], "little")
        return cls(base_addr, major, [(packed >> (7 * i)) & 0x7F for i in range(LINES_PER_REGION)])


def region_of(addr: int) -> int:
    return addr - addr % REGION


def bump_minor(cb: CounterBlock, line_idx: int) -> Optional[list[int]]:
    """Advance one line's counter.

    Returns None normally. On minor overflow the major is incremented, all
    minors reset, and the 64 region line addresses that need re-encryption
    are returned.
    """
    if not 0 <= line_idx < LINES_PER_REGION:
        raise IndexError(line_idx)
    if cb.minors[line_idx] < MINOR_MAX:
        cb.minors[line_idx] += 1
        return None
    cb.major += 1
    cb.minors = [0] * LINES_PER_REGION
    return [cb.base_addr + i * LINE for i in range(LINES_PER_REGION)]


class CounterCache:
    """Write-back LRU counter cache in the memory controller."""

    def __init__(self, capacity: int, nvm: Nvm):
        if capacity < LINE:
            raise ValueError("counter cache smaller than one block")
        self.capacity = capacity
        self.max_entries = capacity // LINE
        self.nvm = nvm
        self.layout: NvmLayout = nvm.layout
        self.entries: "OrderedDict[int, CounterBlock]" = OrderedDict()
        self.dirty: set[int] = set()
        self.hits = 0
        self.misses = 0

    def lookup(self, region: int) -> tuple[CounterBlock, bool]:
        if region % REGION:
            raise ValueError(f"region {region:#x} is not 4 KiB aligned")
        cb = self.entries.get(region)
        if cb is not None:
            self.entries.move_to_end(region)
            self.hits += 1
            return cb, True
        self.misses += 1
        raw = self.nvm.read(self.layout.counter_addr(region), SECURITY_METADATA)
        cb = CounterBlock.deserialize(region, raw)
        if len(self.entries) >= self.max_entries:
            old, ob = self.entries.popitem(last=False)
            if old in self.dirty:
                self.dirty.discard(old)
                self.nvm.write(self.layout.counter_addr(old), ob.serialize(), SECURITY_METADATA)
        self.entries[region] = cb
        return cb, False

    def mark_dirty(self, region: int) -> None:
        self.dirty.add(region)

    def peek(self, region: int) -> CounterBlock:
        cb = self.entries.get(region)
        if cb is not None:
            return cb
        return CounterBlock.deserialize(region, self.nvm.peek(self.layout.counter_addr(region)))

    def flush(self) -> int:
        """Write every dirty block back; returns the number of blocks written."""
        n = 0
        for region in sorted(self.dirty):
            self.nvm.write(self.layout.counter_addr(region), self.entries[region].serialize(), SECURITY_METADATA)
            n += 1
        self.dirty.clear()
        return n

    def clear(self) -> None:
        self.entries.clear()
        self.dirty.clear()


def counter_lookup(cc: CounterCache, region: int, nvm: Optional[Nvm] = None) -> CounterBlock:
    if nvm is not None and nvm is not cc.nvm:
        raise ValueError("counter cache is bound to a different NVM")
    return cc.lookup(region)[0]


def encrypt_line(plain: bytes, pad: bytes) -> bytes:
    return xor_line(plain, pad)


decrypt_line = encrypt_line

__all__ = [
    "CounterBlock", "CounterCache", "Otp", "OtpEngine", "Seed", "SeedLog", "bump_minor", "counter_lookup",
    "gen_otp", "region_of", "seed_blocks_batch", "xor_line", "ZERO_LINE",
]
