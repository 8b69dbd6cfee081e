import io
import struct

import pytest
from hypothesis import given, strategies as st

from eadrsim.core_model import LINE, ZERO_LINE
from eadrsim.crash_audit import GroundTruth, Simulator
from eadrsim.workloads import (
    CORE_ARENA_STRIDE, KINDS, Op, TxnSpec, core_spec, dump_trace, generate_trace, interleave_cores, load_trace,
    multicore_trace, queue_trace, random_trace,
)


def test_array_three_txns_are_sequential():
    ops = generate_trace("array", TxnSpec(txn_size=64, n_txns=3))
    assert [(o.kind, o.addr) for o in ops] == [("W", 0), ("W", 64), ("W", 128)]


def test_array_wraps_within_arena():
    ops = generate_trace("array", TxnSpec(txn_size=256, n_txns=10, arena_bytes=1024))
    assert max(o.addr for o in ops) < 1024
    assert [o.addr for o in ops[:4]] == [0, 64, 128, 192]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("txn", [64, 256, 1024])
def test_generation_is_deterministic_and_in_arena(kind, txn):
    spec = TxnSpec(txn_size=txn, n_txns=150, arena_bytes=64 * 1024, base=CORE_ARENA_STRIDE)
    a, b = generate_trace(kind, spec), generate_trace(kind, spec)
    assert a == b and a
    for o in a:
        assert o.kind in ("R", "W")
        assert o.addr % LINE == 0
        assert spec.base <= o.addr < spec.base + spec.arena_bytes
        assert (o.value is None) == (o.kind == "R")
        assert o.value is None or len(o.value) == LINE


@pytest.mark.parametrize("kind", KINDS)
def test_seeds_change_the_trace(kind):
    a = generate_trace(kind, TxnSpec(n_txns=50, rng_seed=1, value_seed=1))
    b = generate_trace(kind, TxnSpec(n_txns=50, rng_seed=2, value_seed=2))
    assert a != b


def test_queue_five_enqueues_then_five_dequeues_restores_elements():
    spec = TxnSpec(txn_size=128, arena_bytes=4096)
    ops = queue_trace(spec, ["enq"] * 5 + ["deq"] * 5)
    gt = GroundTruth.replay(ops)
    meta = {0, 64}
    for addr, v in gt.current.items():
        if addr not in meta:
            assert v == ZERO_LINE
    assert gt.read(0)[:8] == (5).to_bytes(8, "little")
    assert gt.read(64)[:8] == (5).to_bytes(8, "little")


def test_queue_underflow_and_overflow():
    with pytest.raises(ValueError):
        queue_trace(TxnSpec(arena_bytes=4096), ["deq"])
    with pytest.raises(ValueError):
        queue_trace(TxnSpec(txn_size=64, arena_bytes=4 * 64), ["enq"] * 3)


@pytest.mark.parametrize("kind", KINDS)
def test_arena_too_small(kind):
    with pytest.raises(ValueError):
        generate_trace(kind, TxnSpec(txn_size=1024, n_txns=5, arena_bytes=64))


def test_txn_size_must_be_line_multiple():
    with pytest.raises(ValueError):
        TxnSpec(txn_size=100)


def test_unknown_kind():
    with pytest.raises(ValueError):
        generate_trace("skiplist", TxnSpec())


def test_max_ops_truncates():
    assert len(generate_trace("btree", TxnSpec(n_txns=500, max_ops=37))) == 37


def test_hash_probes_stay_in_table_and_load_at_most_half():
    spec = TxnSpec(txn_size=64, n_txns=2000, arena_bytes=64 * 64)
    ops = generate_trace("hash", spec)
    buckets = {o.addr for o in ops if o.kind == "W"}
    assert len(buckets) <= 32


def _nodes(ops, keyspace):
    gt = GroundTruth.replay(ops)
    return {a // LINE + 1: v for a, v in gt.current.items() if a < keyspace * LINE}


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_rbtree_final_state_is_a_valid_red_black_tree(seed):
    spec = TxnSpec(txn_size=64, n_txns=400, arena_bytes=64 * 1024, rng_seed=seed)
    keyspace = spec.arena_bytes // (spec.txn_size + LINE)
    raw = _nodes(generate_trace("rbtree", spec), keyspace)
    nodes = {i: struct.unpack_from("<QIIIB", v) for i, v in raw.items()}
    roots = [i for i, n in nodes.items() if n[3] == 0]
    assert len(roots) == 1 and not nodes[roots[0]][4]

    def check(x, lo, hi):
        if x == 0:
            return 1
        key, left, right, parent, red = nodes[x]
        assert lo < key < hi
        for c in (left, right):
            if c:
                assert nodes[c][3] == x
                assert not (red and nodes[c][4])
        bl, br = check(left, lo, key), check(right, key, hi)
        assert bl == br
        return bl + (0 if red else 1)

    check(roots[0], 0, keyspace + 1)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_btree_final_state_is_balanced_and_sorted(seed):
    spec = TxnSpec(txn_size=64, n_txns=400, arena_bytes=64 * 1024, rng_seed=seed)
    keyspace = spec.arena_bytes // (spec.txn_size + LINE)
    raw = _nodes(generate_trace("btree", spec), keyspace)
    nodes = {}
    for i, v in raw.items():
        f = struct.unpack_from("<II3Q4II", v)
        nk, leaf = f[0], f[1]
        nodes[i] = (list(f[2:2 + nk]), [] if leaf else list(f[5:5 + nk + 1]), f[9])
    roots = [i for i, n in nodes.items() if n[2] == 0]
    assert len(roots) == 1
    depths = set()
    keys = []

    def walk(x, d):
        ks, kids, _ = nodes[x]
        assert 1 <= len(ks) <= 3 and ks == sorted(ks)
        if not kids:
            depths.add(d)
            keys.extend(ks)
            return
        for j, c in enumerate(kids):
            assert nodes[c][2] == x
            walk(c, d + 1)
            if j < len(ks):
                keys.append(ks[j])

    walk(roots[0], 0)
    assert len(depths) == 1
    assert keys == sorted(set(keys))


def test_one_core_interleave_is_identity():
    t = generate_trace("array", TxnSpec(n_txns=5))
    assert interleave_cores([t]) == t


def test_two_cores_alternate():
    a = generate_trace("array", core_spec(TxnSpec(n_txns=3), 0))
    b = generate_trace("array", core_spec(TxnSpec(n_txns=3), 1))
    out = interleave_cores([a, b])
    assert [o.core for o in out] == [0, 1, 0, 1, 0, 1]
    assert [o for o in out if o.core == 0] == a


def test_overlapping_arenas_rejected():
    a = generate_trace("array", TxnSpec(n_txns=3))
    with pytest.raises(ValueError):
        interleave_cores([a, a])
    with pytest.raises(ValueError):
        interleave_cores([a, a], [(0, 4096), (2048, 4096)])


def test_core_arenas_are_64_mib_apart():
    ops = multicore_trace("array", TxnSpec(n_txns=4), 3)
    assert {o.addr // CORE_ARENA_STRIDE for o in ops} == {0, 1, 2}
    assert {o.core for o in ops} == {0, 1, 2}


def test_more_cores_more_l3_misses():
    misses = []
    for cores in (1, 2, 4, 8):
        ops = multicore_trace("array", TxnSpec(n_txns=400, arena_bytes=400 * 64), cores)
        sim = Simulator("baseline", "wo")
        sim.run(ops)
        misses.append(sim.finish().misses[-1])
    assert misses == sorted(misses) and misses[0] < misses[-1]


@given(st.integers(0, 2000), st.integers(1, 3))
def test_text_format_round_trip(seed, cores):
    ops = random_trace(30, seed, arena_bytes=8192, cores=cores)
    buf = io.StringIO()
    dump_trace(ops, buf)
    buf.seek(0)
    assert load_trace(buf) == ops


@pytest.mark.parametrize("bad", ["0 X 0x0 -", "0 W 0x0 abcd", "0 R 0x0"])
def test_text_format_rejects_malformed(bad):
    with pytest.raises(ValueError):
        load_trace(io.StringIO(bad + "\n"))


def test_text_format_skips_comments():
    assert load_trace(io.StringIO("# header\n\n1 R 0x40 -\n")) == [Op(1, "R", 64)]
