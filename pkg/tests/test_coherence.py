import random

import pytest
from hypothesis import given, settings, strategies as st

from pimsim.coherence import (
    AccessKind,
    Agent,
    CondaEpoch,
    CoherenceOutcome,
    CpuCache,
    Decision,
    EpochStatus,
    LineState,
    ProtocolError,
    RegionLocks,
    Signature,
    SystemState,
    cg_acquire,
    cg_cpu_access,
    cg_pim_access,
    cg_release,
    conda_conflicts,
    conda_record,
    conda_resolve,
    conda_rollback_and_reexecute,
    cpu_cached_access,
    fg_access,
    ideal_access,
    mesi_ok,
    nc_access,
)
from pimsim.oracle import bloom_bits_for, bloom_fpr_estimate

R, W = AccessKind.READ, AccessKind.WRITE


def state(lines=8, ways=2):
    return SystemState(CpuCache(lines, ways))


# -- CPU cache -------------------------------------------------------------------

def test_cache_is_lru_within_a_set():
    c = CpuCache(2, 2)  # one set, two ways
    c.fill(0, LineState.EXCLUSIVE, 0)
    c.fill(1, LineState.EXCLUSIVE, 0)
    c.touch(0)
    victim = c.fill(2, LineState.EXCLUSIVE, 0)
    assert victim[0] == 1
    assert 0 in c and 2 in c and 1 not in c


def test_dirty_victim_is_written_back():
    s = state(1, 1)
    cpu_cached_access(s, 5, W, 11)
    out = cpu_cached_access(s, 6, R)
    assert s.memory.read(5) == 11
    assert out.dram_accesses == 2 and out.channel_transfers == 2


# -- FG ------------------------------------------------------------------------

def test_fg_pim_read_of_modified_line():
    s = state()
    fg_access(Agent.CPU, 3, W, s, 42)
    out = fg_access(Agent.PIM, 3, R, s)
    assert out.messages_on_channel == 2
    assert out.value == 42
    assert out.flushed_lines == [3]
    assert s.cache.state(3) is LineState.SHARED


def test_fg_pim_write_invalidates_cpu_copy():
    s = state()
    fg_access(Agent.CPU, 3, R, s)
    out = fg_access(Agent.PIM, 3, W, s, 9)
    assert out.messages_on_channel == 2
    assert s.cache.state(3) is LineState.INVALID
    assert fg_access(Agent.CPU, 3, R, s).value == 9


def test_fg_uncached_pim_access_sends_no_messages():
    s = state()
    assert fg_access(Agent.PIM, 7, R, s).messages_on_channel == 0


def test_ideal_has_fg_transitions_without_traffic():
    s = state()
    fg_access(Agent.CPU, 3, W, s, 1)
    out = ideal_access(Agent.PIM, 3, R, s)
    assert (out.messages_on_channel, out.channel_transfers, out.dram_accesses) == (0, 0, 1)
    assert s.cache.state(3) is LineState.SHARED
    assert out.value == 1


# -- NC ------------------------------------------------------------------------

def test_nc_cpu_bypasses_cache():
    s = state()
    out = nc_access(Agent.CPU, 4, W, s, 5)
    assert 4 not in s.cache
    assert s.memory.read(4) == 5
    assert out.channel_transfers == 1
    assert nc_access(Agent.PIM, 4, R, s).value == 5


# -- CG ------------------------------------------------------------------------

def test_cg_acquire_flushes_region_and_blocks_cpu_writes():
    s, locks = state(), RegionLocks()
    s.line_region.update({1: 0, 2: 0, 9: 1})
    for ln in (1, 2, 9):
        cpu_cached_access(s, ln, W, 100 + ln)
    out = cg_acquire(Agent.PIM, 0, s, locks)
    assert out.messages_on_channel == 1
    assert sorted(out.flushed_lines) == [1, 2]
    assert 1 not in s.cache and 2 not in s.cache and 9 in s.cache
    assert s.memory.read(1) == 101
    assert cg_cpu_access(1, W, s, locks, 7).decision is Decision.STALL
    rd = cg_cpu_access(2, R, s, locks)
    assert rd.decision is Decision.PROCEED and rd.value == 102 and 2 not in s.cache
    cg_pim_access(1, W, s, 55)
    assert cg_release(Agent.PIM, 0, s, locks).messages_on_channel == 1
    assert cg_cpu_access(1, R, s, locks).value == 55


def test_cg_release_by_non_holder_is_an_error():
    s, locks = state(), RegionLocks()
    with pytest.raises(ProtocolError):
        cg_release(Agent.PIM, 0, s, locks)
    cg_acquire(Agent.CPU, 0, s, locks)
    assert cg_acquire(Agent.PIM, 0, s, locks).decision is Decision.STALL


# -- sequential reference check ----------------------------------------------------

ops = st.lists(
    st.tuples(st.sampled_from([Agent.CPU, Agent.PIM]), st.sampled_from([R, W]), st.integers(0, 11)),
    max_size=60,
)


@settings(max_examples=150)
@given(ops, st.sampled_from(["fg", "ideal", "nc", "cg"]))
def test_mechanisms_behave_like_sequential_memory(seq, mech):
    """Executed one at a time, every read returns the last value written (reference: a dict)."""
    s, locks = state(4, 2), RegionLocks()
    for ln in range(12):
        s.line_region[ln] = ln % 2
    ref: dict[int, int] = {}
    held = set()
    for i, (agent, kind, ln) in enumerate(seq, start=1):
        value = i if kind is W else None
        if mech == "cg":
            region = ln % 2
            if agent is Agent.PIM and region not in held:
                cg_acquire(Agent.PIM, region, s, locks)
                held.add(region)
            if agent is Agent.CPU and region in held:
                cg_release(Agent.PIM, region, s, locks)
                held.discard(region)
            out = cg_pim_access(ln, kind, s, value) if agent is Agent.PIM else cg_cpu_access(ln, kind, s, locks, value)
        elif mech == "nc":
            out = nc_access(agent, ln, kind, s, value)
        else:
            out = (fg_access if mech == "fg" else ideal_access)(agent, ln, kind, s, value)
        if kind is W:
            ref[ln] = value
        else:
            assert out.value == ref.get(ln, 0)
        assert mesi_ok(s)
    assert {k: v for k, v in s.coherent_view().items() if v} == ref


# -- signatures ----------------------------------------------------------------------

@settings(max_examples=100)
@given(st.lists(st.integers(0, 2**40), max_size=300), st.sampled_from([(64, 1), (2048, 4), (512, 3)]))
def test_signature_has_no_false_negatives(lines, geometry):
    sig = Signature(*geometry)
    for ln in lines:
        sig.insert(ln)
    assert all(sig.maybe_contains(ln) for ln in lines)


def test_signature_clear():
    sig = Signature()
    sig.insert(5)
    sig.clear()
    assert sig.popcount() == 0 and not sig.maybe_contains(5)


@pytest.mark.parametrize("n", [128, 256])
def test_signature_fpr_matches_bloom_estimate(n):
    rng = random.Random(n)
    trials, probes, hits, total = 40, 2500, 0, 0
    for _ in range(trials):
        sig = Signature(2048, 4)
        inserted = set(rng.sample(range(1 << 30), n))
        for ln in inserted:
            sig.insert(ln)
        for _ in range(probes):
            ln = rng.randrange(1 << 30, 1 << 31)
            hits += sig.maybe_contains(ln)
            total += 1
    measured = hits / total
    expected = bloom_fpr_estimate(2048, 4, n)
    assert abs(measured - expected) <= 0.2 * expected


# -- CoNDA -------------------------------------------------------------------------------

def test_record_on_non_optimistic_epoch_is_an_error():
    ep = CondaEpoch.new()
    conda_resolve(ep, [], [])
    with pytest.raises(ProtocolError):
        conda_record(ep, 1, R)
    with pytest.raises(ProtocolError):
        conda_resolve(ep, [], [])
    with pytest.raises(ProtocolError):
        conda_rollback_and_reexecute(ep)


def test_dirty_line_in_read_set_conflicts_and_flushes():
    s = state()
    cpu_cached_access(s, 7, W, 70)
    ep = CondaEpoch.new()
    conda_record(ep, 7, R)
    res = conda_resolve(ep, s.cache.dirty_lines(), [], s)
    assert res.decision is Decision.CONFLICT and res.flushed == [7]
    assert res.messages_on_channel == 3
    assert 7 not in s.cache and s.memory.read(7) == 70
    assert ep.status is EpochStatus.ROLLED_BACK


def test_cpu_read_of_pim_written_line_conflicts():
    ep = CondaEpoch.new()
    conda_record(ep, 3, W, 1)
    conflict, culprits = conda_conflicts(ep, [], [3])
    assert conflict and culprits == []


def test_rollback_discards_buffered_writes():
    s = state()
    ep = CondaEpoch.new()
    conda_record(ep, 2, W, 99)
    conda_record(ep, 4, R)
    cpu_cached_access(s, 4, W, 1)
    assert not conda_resolve(ep, s.cache.dirty_lines(), [], s).committed
    directive = conda_rollback_and_reexecute(ep)
    assert directive.rollbacks == 1 and directive.restart_at == 0
    assert ep.write_buffer == {} and ep.read_sig.popcount() == 0
    assert s.memory.read(2) == 0
    assert ep.status is EpochStatus.OPTIMISTIC


def test_commit_drains_buffer_and_invalidates_stale_copies():
    s = state()
    cpu_cached_access(s, 5, R)
    ep = CondaEpoch.new()
    conda_record(ep, 5, W, 123)
    res = conda_resolve(ep, [], [], s)
    assert res.committed
    assert s.memory.read(5) == 123 and 5 not in s.cache
    assert ep.status is EpochStatus.COMMITTED


def test_no_false_negative_conflicts_randomized():
    rng = random.Random(11)
    for _ in range(2000):
        pim = rng.sample(range(10_000), rng.randint(1, 40))
        ep = CondaEpoch.new()
        for ln in pim:
            conda_record(ep, ln, W if rng.random() < 0.5 else R, 1)
        overlap = rng.choice(pim)
        dirty = rng.sample(range(10_000, 20_000), rng.randint(0, 10)) + [overlap]
        assert not conda_resolve(ep, dirty, []).committed


def test_disjoint_sets_commit_with_sized_signatures():
    rng = random.Random(12)
    n = 40
    m = bloom_bits_for(n, 4, 1e-4)
    commits = 0
    for _ in range(2000):
        ep = CondaEpoch.new(m, 4)
        for ln in rng.sample(range(10_000), n):
            conda_record(ep, ln, R)
        commits += conda_resolve(ep, rng.sample(range(10_000, 20_000), 10), []).committed
    assert commits / 2000 > 0.99


def test_outcome_defaults():
    out = CoherenceOutcome()
    assert out.decision is Decision.PROCEED and out.flushed_lines == []
