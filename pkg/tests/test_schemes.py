import random

import pytest
from hypothesis import given, strategies as st

from eadrsim.cme import DOMAIN_COTP, DOMAIN_CRASH_BBE, DOMAIN_RUNTIME, REGION, OtpEngine, Seed
from eadrsim.core_model import LINE, TO_NVM, USER_DATA, ZERO_LINE, AddressError, SimulationError, Victim, xor_line
from eadrsim.crash_audit import GroundTruth, audit_confidentiality, audit_pad_uniqueness
from eadrsim.eadr import EadrModel
from eadrsim.schemes import (
    SCHEME_IDS, Bbe, IncompatibleModel, McCme, Sepencr, SystemConfig, UnrecoverableState, check_compatible,
    make_scheme, scheme_id,
)
from eadrsim.workloads import Op

from conftest import TINY, line

ALL = SCHEME_IDS + ("discard",)


def _oracle():
    return OtpEngine(TINY.key)


def _decrypt_home(s, addr):
    """Independent decryption of a home line from its stored counter block."""
    from eadrsim.cme import CounterBlock
    lay = s.layout
    region = addr - addr % REGION
    cb = CounterBlock.deserialize(region, s.nvm.peek(lay.counter_addr(region)))
    if region in s.counters.entries:
        cb = s.counters.entries[region]
    major, minor = cb.counters((addr % REGION) // LINE)
    return xor_line(s.nvm.peek(addr), _oracle().pad(DOMAIN_RUNTIME, addr, major, minor))


@pytest.mark.parametrize("name", ALL)
def test_write_then_read_returns_value(name):
    s = make_scheme(name, TINY)
    s.host_write(0, 640, line(3))
    assert s.host_read(1, 640) == line(3)
    assert s.host_read(0, 64) == ZERO_LINE


ops_strategy = st.lists(
    st.tuples(st.integers(0, 1), st.booleans(), st.integers(0, 300), st.integers(0, 2**32)), max_size=250)


@given(ops_strategy)
def test_all_schemes_read_identically_without_crashes(ops):
    trace = [Op(c, "W" if w else "R", a * LINE, line(v) if w else None) for c, w, a, v in ops]
    truth = GroundTruth()
    expected = [truth.apply(i, op) for i, op in enumerate(trace)]
    for name in SCHEME_IDS:
        s = make_scheme(name, TINY)
        got = [s.host_write(o.core, o.addr, o.value) if o.kind == "W" else s.host_read(o.core, o.addr)
               for o in trace]
        assert got == expected, name


@pytest.mark.parametrize("name", SCHEME_IDS)
def test_rejects_non_user_address(name):
    s = make_scheme(name, TINY)
    with pytest.raises(AddressError):
        s.host_write(0, TINY.nvm_size, line(0))
    with pytest.raises(ValueError):
        s.host_read(0, 3)


def test_sepencr_slot_holds_value_xor_cotp():
    s = make_scheme("sepencr", TINY)
    s.host_write(0, 0, line(1))
    n = s.cache.locate(0)
    pad = _oracle().pad(DOMAIN_COTP, TINY.nvm_size + n * LINE, 1)
    assert s.raw_slot(n) == xor_line(line(1), pad) != line(1)


def test_sepencr_cotp_table_definition_and_half_capacity():
    s = make_scheme("sepencr", TINY)
    assert s.cache.n_slots == TINY.geometry.total_lines // 2
    eng = _oracle()
    for n in (0, 17, s.cache.n_slots - 1):
        assert s.cotp[n] == eng.pad(DOMAIN_COTP, TINY.nvm_size + n * LINE, s.crash_count)
    # slot determinism: a fresh instance regenerates the same table
    assert make_scheme("sepencr", TINY).cotp == s.cotp


def test_eadr_cme_cache_holds_ciphertext():
    s = make_scheme("eadr-cme", TINY)
    s.host_write(0, 0, line(1))
    raw = s.raw_slot(s.cache.locate(0))
    assert raw != line(1)
    assert xor_line(raw, _oracle().pad(DOMAIN_RUNTIME, 0, 0, 1)) == line(1)


def _evict(s, addr):
    n = s.cache.locate(addr)
    v = s.cache._take(n)
    s.evict_writeback(v)


def test_baseline_eviction_payload_is_plaintext():
    s = make_scheme("baseline", TINY)
    s.host_write(0, 0, line(5))
    _evict(s, 0)
    ev = s.trace.user_events()
    assert len(ev) == 1 and ev[0].direction == TO_NVM and ev[0].payload == line(5)


def test_sepencr_eviction_decrypts_with_m_otp_alone():
    s = make_scheme("sepencr", TINY)
    s.host_write(0, 128, line(6))
    _evict(s, 128)
    assert s.nvm.peek(128) != line(6)
    assert _decrypt_home(s, 128) == line(6)


def test_mc_cme_repeated_writebacks_differ():
    s = make_scheme("mc-cme", TINY)
    s.host_write(0, 0, line(1))
    assert s.flush_line(0)
    first = s.nvm.peek(0)
    s.host_write(0, 0, line(1))
    assert s.flush_line(0)
    assert s.nvm.peek(0) != first
    assert _decrypt_home(s, 0) == line(1)


@pytest.mark.parametrize("name", ["mc-cme", "sepencr", "bbe"])
def test_overflow_during_writeback_keeps_region_decryptable(name):
    s = make_scheme(name, TINY)
    for i in range(64):
        s.host_write(0, i * LINE, line(i))
        s.flush_line(i * LINE)
    for k in range(126):  # bumps 2..127
        s.host_write(0, 0, line(1000 + k))
        s.flush_line(0)
    assert s.overflows == 0
    s.host_write(0, 0, line(5000))
    s.flush_line(0)
    assert s.overflows == 1
    assert _decrypt_home(s, 0) == line(5000)
    for i in range(1, 64):
        assert _decrypt_home(s, i * LINE) == line(i)
        assert s.peek(i * LINE) == line(i)
    assert audit_pad_uniqueness(s.log) == []


def test_eadr_cme_overflow_reencrypts_cached_and_home_lines():
    s = make_scheme("eadr-cme", TINY)
    for i in range(64):
        s.host_write(0, i * LINE, line(i))
    s.flush_line(5 * LINE)
    for k in range(127):
        s.host_write(0, 0, line(100 + k))
    assert s.overflows == 1
    for i in range(1, 64):
        assert s.host_read(0, i * LINE) == line(i)
    assert audit_pad_uniqueness(s.log) == []


# ---------------------------------------------------------------- crash + recover


def _dirty(s, addrs, base=0):
    for i, a in enumerate(addrs):
        s.host_write(i % 2, a, line(base + i))


def test_bbe_incompatible_with_write_only():
    with pytest.raises(IncompatibleModel) as e:
        check_compatible("bbe", "write-only")
    assert "compute" in str(e.value) or "AES" in str(e.value)
    for m in ("all-operation", "write-compute-order"):
        check_compatible("bbe", m)
    for sch in ("baseline", "mc-cme", "eadr-cme", "sepencr"):
        check_compatible(sch, "write-only")


def test_sepencr_crash_with_three_dirty_slots():
    s = make_scheme("sepencr", TINY)
    _dirty(s, [0, 64, 128])
    before = len(s.trace.events)
    s.crash_flush("write-only")
    user = [e for e in s.trace.events[before:] if e.cls == USER_DATA]
    assert len(user) == 3
    assert {e.subject for e in user} == {0, 64, 128}
    assert all(e.payload not in (line(0), line(1), line(2)) for e in user)


def test_sepencr_crash_computes_nothing_and_reads_nothing():
    s = make_scheme("sepencr", TINY)
    _dirty(s, [0, 64])
    calls, reads = s.engine.calls, s.nvm.reads
    s.crash_flush("write-only")
    assert (s.engine.calls, s.nvm.reads) == (calls, reads)


def test_baseline_crash_leaks_exactly_one_line():
    s = make_scheme("baseline", TINY)
    s.host_write(0, 64, line(9))
    truth = GroundTruth()
    truth.apply(0, Op(0, "W", 64, line(9)))
    s.nvm.step = 1
    s.crash_flush("write-only")
    assert len(audit_confidentiality(s.trace, truth)) == 1


@pytest.mark.parametrize("name,model", [
    ("bbe", "write-compute-order"), ("bbe", "all-operation"), ("sepencr", "write-only"),
    ("sepencr", "all-operation"), ("eadr-cme", "write-only"), ("mc-cme", "all-operation"),
    ("mc-cme", "write-only"), ("baseline", "write-only"),
])
def test_recovery_restores_all_dirty_lines(name, model):
    s = make_scheme(name, TINY)
    rng = random.Random(3)
    addrs = rng.sample(range(0, 2000 * LINE, LINE), 100)
    _dirty(s, addrs)
    pre = s.dirty_snapshot()
    assert pre
    s.crash_flush(model)
    s.recover()
    for a, v in pre.items():
        assert s.host_read(0, a) == v


def test_bbe_reinstalls_lines_in_their_slots_and_dirty():
    s = make_scheme("bbe", TINY)
    _dirty(s, [0, 64, 4096])
    slots = {a: s.cache.locate(a) for a in (0, 64, 4096)}
    s.crash_flush("write-compute-order")
    assert s.cache.where == {}
    s.recover()
    assert {a: s.cache.locate(a) for a in slots} == slots
    assert all(s.cache.dirty[n] for n in slots.values())


def test_bbe_incr_counter_advances_by_slot_count():
    s = make_scheme("bbe", TINY)
    assert s.incr_counter == 1
    _dirty(s, [0, 64])
    s.crash_flush("wco")
    s.recover()
    assert s.incr_counter == 1 + s.cache.n_slots
    s.crash_flush("all")  # empty-ish cache still advances
    s.recover()
    assert s.incr_counter == 1 + 2 * s.cache.n_slots


def test_bbe_crash_seeds_live_outside_user_space():
    s = make_scheme("bbe", TINY)
    _dirty(s, [i * LINE for i in range(50)])
    for i in range(50):
        s.flush_line(i * LINE)
    s.host_write(0, 0, line(77))
    s.crash_flush("wco")
    arr = s.log.array("encrypt")
    dom = arr[:, 0] >> 6
    line_no = arr[:, 10:16].astype("u8")
    addrs = sum(line_no[:, k] << (8 * (5 - k)) for k in range(6)) * LINE
    assert (addrs[dom == DOMAIN_CRASH_BBE] >= TINY.nvm_size).all()
    assert (addrs[dom == DOMAIN_RUNTIME] < TINY.nvm_size).all()


def test_bbe_pad_is_from_incr_counter_and_slot():
    s = make_scheme("bbe", TINY)
    s.host_write(0, 0, line(1))
    n = s.cache.locate(0)
    s.crash_flush("wco")
    pad = _oracle().pad(DOMAIN_CRASH_BBE, TINY.nvm_size + n * LINE, 1 + n)
    assert s.nvm.peek(s.layout.shadow_addr(n)) == xor_line(line(1), pad)


def test_sepencr_crash_count_and_disjoint_cotp_seeds():
    s = make_scheme("sepencr", TINY)
    _dirty(s, [0, 64])
    first = {bytes(r) for r in s.log.array("encrypt")}
    s.crash_flush("wo")
    s.recover()
    assert s.crash_count == 2
    allseeds = s.log.array("encrypt")
    second = {bytes(r) for r in allseeds[len(first):]}
    assert first.isdisjoint(second)
    _dirty(s, [128])
    s.crash_flush("wo")
    s.recover()
    assert s.crash_count == 3
    assert s.host_read(0, 0) == line(0) and s.host_read(0, 128) == line(0)
    assert audit_pad_uniqueness(s.log) == []


def test_empty_cache_crash_is_a_no_op_for_data():
    for name in ("bbe", "sepencr"):
        s = make_scheme(name, TINY)
        s.crash_flush("all-operation")
        assert s.trace.user_events() == []
        regs = s.registers()
        s.recover()
        assert s.cache.where == {}
        assert s.registers() != regs or name == "bbe"


def test_mc_cme_degraded_flush_uses_no_reads_or_compute():
    s = make_scheme("mc-cme", TINY)
    _dirty(s, [0, 64])
    calls, reads = s.engine.calls, s.nvm.reads
    s.crash_flush("write-only")
    assert (s.engine.calls, s.nvm.reads) == (calls, reads)
    s.recover()
    assert s.host_read(0, 64) == line(1)


def test_mc_cme_all_operation_flush_encrypts():
    s = make_scheme("mc-cme", TINY)
    _dirty(s, [0, 64])
    s.crash_flush("all-operation")
    assert s.nvm.peek(0) != line(0)
    s.recover()
    assert s.host_read(0, 0) == line(0)


def test_discard_reference_loses_dirty_data():
    s = make_scheme("discard", TINY)
    s.host_write(0, 0, line(1))
    s.crash_flush("write-only")
    s.recover()
    assert s.host_read(0, 0) == ZERO_LINE


def test_corrupted_shadow_metadata_is_unrecoverable():
    s = make_scheme("bbe", TINY)
    s.host_write(0, 0, line(1))
    n = s.cache.locate(0)
    s.crash_flush("wco")
    s.nvm.lines[s.layout.shadow_tag_addr(n)] = b"\x07" + bytes(63)
    with pytest.raises(UnrecoverableState):
        s.recover()


def test_shadow_tag_pointing_to_wrong_set_is_unrecoverable():
    s = make_scheme("sepencr", TINY)
    s.host_write(0, 0, line(1))
    n = s.cache.locate(0)
    s.crash_flush("wo")
    s.nvm.lines[s.layout.shadow_tag_addr(n)] = b"\x01" + (64).to_bytes(8, "little") + bytes(55)
    with pytest.raises(UnrecoverableState):
        s.recover()


def test_host_access_after_crash_requires_recovery():
    s = make_scheme("sepencr", TINY)
    s.crash_flush("wo")
    with pytest.raises(SimulationError):
        s.host_read(0, 0)
    with pytest.raises(SimulationError):
        make_scheme("bbe", TINY).recover()


def test_snapshot_lines_lists_registers_slots_and_shadow():
    s = make_scheme("bbe", TINY)
    s.host_write(0, 0, line(1))
    out = s.snapshot_lines()
    assert out[0] == "# scheme bbe" and "reg incr_counter 1" in out
    assert any(x.startswith("slot ") and x.split()[3] == "D" for x in out)
    s.crash_flush("wco")
    assert any(x.startswith("shadow ") for x in s.snapshot_lines())


def test_scheme_id_aliases_and_unknown():
    assert scheme_id("EadrCME") == "eadr-cme"
    assert scheme_id("CME") == "mc-cme"
    with pytest.raises(ValueError):
        scheme_id("rot13")


def test_model_parse_aliases():
    assert EadrModel.parse("WO") is EadrModel.WRITE_ONLY
    with pytest.raises(ValueError):
        EadrModel.parse("half-power")
