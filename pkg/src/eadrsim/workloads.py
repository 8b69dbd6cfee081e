"""Deterministic address-level persistent microbenchmarks.

No flush instructions appear in any trace: with eADR the caches are in the
persistence domain, so the programs simply store.
"""
from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence

from .core_model import LINE, MiB, ZERO_LINE

KINDS = ("array", "queue", "btree", "hash", "rbtree")
TXN_SIZES = (64, 256, 1024)
CORE_ARENA_STRIDE = 64 * MiB
DEFAULT_ARENA = 128 * 1024
MAX_INSERTS = 1 << 20


class Op(NamedTuple):
    core: int
    kind: str  # "R" or "W"
    addr: int
    value: Optional[bytes] = None


OpTrace = List[Op]


@dataclass(frozen=True)
class TxnSpec:
    txn_size: int = 64
    n_txns: int = 1000
    rng_seed: int = 1
    value_seed: int = 2
    arena_bytes: int = DEFAULT_ARENA
    base: int = 0
    core: int = 0
    max_ops: Optional[int] = None

    def __post_init__(self):
        if self.txn_size <= 0 or self.txn_size % LINE:
            raise ValueError(f"txn_size must be a positive multiple of 64, got {self.txn_size}")
        if self.n_txns < 0:
            raise ValueError("n_txns must be non-negative")
        if self.arena_bytes % LINE or self.base % LINE:
            raise ValueError("arena base and size must be line aligned")


class _Emitter:
    def __init__(self, spec: TxnSpec):
        self.spec = spec
        self.ops: OpTrace = []
        self.values = random.Random(spec.value_seed)
        self.limit = spec.max_ops

    @property
    def full(self) -> bool:
        return self.limit is not None and len(self.ops) >= self.limit

    def read(self, off: int) -> None:
        self.ops.append(Op(self.spec.core, "R", self.spec.base + off))

    def write(self, off: int, value: Optional[bytes] = None) -> None:
        if value is None:
            value = self.values.randbytes(LINE)
        self.ops.append(Op(self.spec.core, "W", self.spec.base + off, value))

    def write_value(self, off: int, nbytes: int) -> None:
        for j in range(0, nbytes, LINE):
            self.write(off + j)

    def result(self) -> OpTrace:
        return self.ops[: self.limit] if self.limit is not None else self.ops


def _word_line(*words: int) -> bytes:
    raw = struct.pack(f"<{len(words)}Q", *words)
    return raw + bytes(LINE - len(raw))


# ---------------------------------------------------------------- array


def _array(spec: TxnSpec) -> OpTrace:
    if spec.arena_bytes < spec.txn_size:
        raise ValueError("arena smaller than one transaction")
    em = _Emitter(spec)
    chunks = spec.arena_bytes // spec.txn_size
    for i in range(spec.n_txns):
        if em.full:
            break
        em.write_value((i % chunks) * spec.txn_size, spec.txn_size)
    return em.result()


# ---------------------------------------------------------------- queue


def queue_trace(spec: TxnSpec, actions: Iterable[str]) -> OpTrace:
    """Ring-buffer FIFO; line 0 holds the head index, line 1 the tail index."""
    cap = (spec.arena_bytes - 2 * LINE) // spec.txn_size
    if cap < 1:
        raise ValueError("arena too small for one queue element")
    em = _Emitter(spec)
    head = tail = 0
    for act in actions:
        if em.full:
            break
        if act == "enq":
            if tail - head >= cap:
                raise ValueError("queue overflow")
            em.read(LINE)
            em.write_value(2 * LINE + (tail % cap) * spec.txn_size, spec.txn_size)
            tail += 1
            em.write(LINE, _word_line(tail))
        elif act == "deq":
            if tail == head:
                raise ValueError("queue underflow")
            em.read(0)
            off = 2 * LINE + (head % cap) * spec.txn_size
            for j in range(0, spec.txn_size, LINE):
                em.read(off + j)
            for j in range(0, spec.txn_size, LINE):
                em.write(off + j, ZERO_LINE)
            head += 1
            em.write(0, _word_line(head))
        else:
            raise ValueError(f"unknown queue action {act!r}")
    return em.result()


def _queue(spec: TxnSpec) -> OpTrace:
    cap = (spec.arena_bytes - 2 * LINE) // spec.txn_size
    if cap < 1:
        raise ValueError("arena too small for one queue element")
    rng = random.Random(spec.rng_seed)
    actions = []
    size = 0
    for _ in range(spec.n_txns):
        if size == 0 or (size < cap and rng.random() < 0.5):
            actions.append("enq")
            size += 1
        else:
            actions.append("deq")
            size -= 1
    return queue_trace(spec, actions)


# ---------------------------------------------------------------- hash


def _mix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def _hash(spec: TxnSpec) -> OpTrace:
    """Open addressing with linear probing; one txn_size bucket per slot."""
    nb = spec.arena_bytes // spec.txn_size
    if nb < 2:
        raise ValueError("arena too small for a hash table")
    keyspace = max(1, nb // 2)  # load factor never exceeds one half
    rng = random.Random(spec.rng_seed)
    em = _Emitter(spec)
    table: list = [None] * nb
    for _ in range(min(spec.n_txns, MAX_INSERTS)):
        if em.full:
            break
        key = rng.randrange(keyspace)
        b = _mix(key) % nb
        while True:
            em.read(b * spec.txn_size)
            if table[b] is None or table[b] == key:
                break
            b = (b + 1) % nb
        table[b] = key
        off = b * spec.txn_size
        em.write(off, _word_line(1, key) [:16] + em.values.randbytes(LINE - 16))
        for j in range(LINE, spec.txn_size, LINE):
            em.write(off + j)
    return em.result()


# ---------------------------------------------------------------- btree


def _tree_layout(spec: TxnSpec) -> tuple[int, int]:
    """(key space, value-slab offset): nodes first, then one value per key."""
    k = spec.arena_bytes // (spec.txn_size + LINE)
    if k < 1:
        raise ValueError("arena too small for a tree node and a value")
    return k, k * LINE


class _BNode:
    __slots__ = ("idx", "keys", "children", "parent")

    def __init__(self, idx: int, parent: int = 0):
        self.idx = idx
        self.keys: list = []
        self.children: list = []
        self.parent = parent

    def encode(self) -> bytes:
        keys = self.keys + [0] * (3 - len(self.keys))
        kids = self.children + [0] * (4 - len(self.children))
        return struct.pack("<II3Q4II", len(self.keys), 0 if self.children else 1, *keys, *kids, self.parent) \
            + bytes(12)


def _btree(spec: TxnSpec) -> OpTrace:
    """2-3-4 B-tree (three keys per 64-byte node) with pre-emptive splits."""
    keyspace, vbase = _tree_layout(spec)
    rng = random.Random(spec.rng_seed)
    em = _Emitter(spec)
    nodes = {1: _BNode(1)}
    next_idx = 2
    root = 1

    def node_off(n: _BNode) -> int:
        return (n.idx - 1) * LINE

    def store(n: _BNode) -> None:
        em.write(node_off(n), n.encode())

    def split(parent: Optional[_BNode], child: _BNode) -> _BNode:
        nonlocal next_idx, root
        right = _BNode(next_idx)
        nodes[next_idx] = right
        next_idx += 1
        mid = child.keys[1]
        right.keys = child.keys[2:]
        child.keys = child.keys[:1]
        if child.children:
            right.children = child.children[2:]
            child.children = child.children[:2]
            for c in right.children:
                nodes[c].parent = right.idx
                store(nodes[c])
        if parent is None:
            parent = _BNode(next_idx)
            nodes[next_idx] = parent
            next_idx += 1
            parent.children = [child.idx]
            root = parent.idx
        pos = parent.children.index(child.idx)
        parent.keys.insert(pos, mid)
        parent.children.insert(pos + 1, right.idx)
        child.parent = right.parent = parent.idx
        store(child)
        store(right)
        store(parent)
        return parent

    store(nodes[1])
    for _ in range(min(spec.n_txns, MAX_INSERTS)):
        if em.full:
            break
        key = rng.randrange(keyspace) + 1
        n = nodes[root]
        em.read(node_off(n))
        if len(n.keys) == 3:
            n = split(None, n)
        found = False
        while True:
            if key in n.keys:
                found = True
                break
            if not n.children:
                break
            i = sum(1 for k in n.keys if k < key)
            child = nodes[n.children[i]]
            em.read(node_off(child))
            if len(child.keys) == 3:
                n = split(n, child)
                continue
            n = child
        if not found:
            n.keys.append(key)
            n.keys.sort()
            store(n)
        em.write_value(vbase + (key - 1) * spec.txn_size, spec.txn_size)
    return em.result()


# ---------------------------------------------------------------- rbtree


def _rbtree(spec: TxnSpec) -> OpTrace:
    """Red-black tree with parent pointers; every modified node is written back."""
    keyspace, vbase = _tree_layout(spec)
    rng = random.Random(spec.rng_seed)
    em = _Emitter(spec)
    # node arrays, index 0 is the nil sentinel
    key = [0]
    left = [0]
    right = [0]
    parent = [0]
    red = [False]
    root = 0
    index_of: dict = {}

    def off(x: int) -> int:
        return (x - 1) * LINE

    def store(x: int) -> None:
        if x:
            em.write(off(x), struct.pack("<QIIIB", key[x], left[x], right[x], parent[x], red[x]) + bytes(43))

    def rotate(x: int, to_left: bool) -> set:
        nonlocal root
        a, b = (right, left) if to_left else (left, right)
        y = a[x]
        a[x] = b[y]
        if b[y]:
            parent[b[y]] = x
        parent[y] = parent[x]
        if not parent[x]:
            root = y
        elif x == left[parent[x]]:
            left[parent[x]] = y
        else:
            right[parent[x]] = y
        b[y] = x
        parent[x] = y
        return {x, y, a[x], parent[y]}

    for _ in range(min(spec.n_txns, MAX_INSERTS)):
        if em.full:
            break
        k = rng.randrange(keyspace) + 1
        y, x = 0, root
        while x and key[x] != k:
            em.read(off(x))
            y = x
            x = left[x] if k < key[x] else right[x]
        if not x:
            z = len(key)
            key.append(k)
            left.append(0)
            right.append(0)
            parent.append(y)
            red.append(True)
            index_of[k] = z
            if not y:
                root = z
            elif k < key[y]:
                left[y] = z
            else:
                right[y] = z
            touched = {z, y}
            while red[parent[z]]:
                p = parent[z]
                g = parent[p]
                p_is_left = p == left[g]
                u = right[g] if p_is_left else left[g]
                if red[u]:
                    red[p] = red[u] = False
                    red[g] = True
                    touched |= {p, u, g}
                    z = g
                    continue
                if z == (right[p] if p_is_left else left[p]):
                    z = p
                    touched |= rotate(z, p_is_left)
                    p = parent[z]
                    g = parent[p]
                red[p] = False
                red[g] = True
                touched |= {p, g}
                touched |= rotate(g, not p_is_left)
            if red[root]:
                red[root] = False
                touched.add(root)
            for t in sorted(touched - {0}):
                store(t)
        em.write_value(vbase + (k - 1) * spec.txn_size, spec.txn_size)
    return em.result()


_GENERATORS = {"array": _array, "queue": _queue, "btree": _btree, "hash": _hash, "rbtree": _rbtree}


def generate_trace(kind: str, spec: TxnSpec) -> OpTrace:
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown workload {kind!r}; expected one of {', '.join(KINDS)}") from None
    return gen(spec)


def core_spec(spec: TxnSpec, core: int) -> TxnSpec:
    """The same workload placed in ``core``'s private arena with its own seeds."""
    return TxnSpec(spec.txn_size, spec.n_txns, spec.rng_seed + 7919 * core, spec.value_seed + 104729 * core,
                   spec.arena_bytes, spec.base + core * CORE_ARENA_STRIDE, core, spec.max_ops)


def interleave_cores(traces: Sequence[OpTrace], arenas: Optional[Sequence[tuple]] = None) -> OpTrace:
    """Round-robin merge preserving per-core order.

    ``arenas`` is an optional list of (base, size) per trace; overlapping arenas
    are rejected. Without it, arenas are inferred from the addresses touched.
    """
    if not 1 <= len(traces) <= 64:
        raise ValueError("between 1 and 64 traces are supported")
    if arenas is None:
        arenas = []
        for t in traces:
            addrs = [op.addr for op in t]
            arenas.append((min(addrs), max(addrs) + LINE - min(addrs)) if addrs else (0, 0))
    spans = sorted((b, b + s) for b, s in arenas if s)
    for (_, e1), (b2, _) in zip(spans, spans[1:]):
        if b2 < e1:
            raise ValueError("per-core arenas overlap")
    out: OpTrace = []
    longest = max((len(t) for t in traces), default=0)
    for i in range(longest):
        for t in traces:
            if i < len(t):
                out.append(t[i])
    return out


def multicore_trace(kind: str, spec: TxnSpec, cores: int, total_ops: Optional[int] = None) -> OpTrace:
    per = None if total_ops is None else -(-total_ops // cores)
    traces, arenas = [], []
    for c in range(cores):
        s = core_spec(spec, c)
        if per is not None:
            s = TxnSpec(s.txn_size, max(s.n_txns, per), s.rng_seed, s.value_seed, s.arena_bytes, s.base, c, per)
        traces.append(generate_trace(kind, s))
        arenas.append((s.base, s.arena_bytes))
    out = interleave_cores(traces, arenas)
    return out[:total_ops] if total_ops is not None else out


# ---------------------------------------------------------------- text format


def dump_trace(ops: Iterable[Op], fh) -> None:
    """``core op addr hexvalue`` per line; reads carry ``-``."""
    for op in ops:
        val = "-" if op.value is None else op.value.hex()
        fh.write(f"{op.core} {op.kind} {op.addr:#x} {val}\n")


def load_trace(fh) -> OpTrace:
    out: OpTrace = []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4 or parts[1] not in ("R", "W"):
            raise ValueError(f"line {lineno}: expected 'core R|W addr hexvalue'")
        core, kind, addr = int(parts[0]), parts[1], int(parts[2], 0)
        if kind == "W":
            value = bytes.fromhex(parts[3])
            if len(value) != LINE:
                raise ValueError(f"line {lineno}: write value must be 64 bytes")
        else:
            value = None
        out.append(Op(core, kind, addr, value))
    return out


def random_trace(n_ops: int, seed: int, arena_bytes: int = 8 * MiB, cores: int = 1, write_frac: float = 0.5,
                 base: int = 0) -> OpTrace:
    """Uniform random reads/writes over a shared arena (for equivalence testing)."""
    rng = random.Random(seed)
    lines = arena_bytes // LINE
    out: OpTrace = []
    for _ in range(n_ops):
        core = rng.randrange(cores)
        addr = base + rng.randrange(lines) * LINE
        if rng.random() < write_frac:
            out.append(Op(core, "W", addr, rng.randbytes(LINE)))
        else:
            out.append(Op(core, "R", addr))
    return out
