import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from pimsim.coherence import AccessKind, CpuCache, LineState, SystemState, cpu_cached_access
from pimsim.engine import Simulator
from pimsim.machine import MachineConfig
from pimsim import Mechanism
from pimsim.oracle import pei_serial_outcomes, sequential_pei
from pimsim.pei import (
    ExecutionSite,
    PeiOp,
    Pmu,
    SiteKind,
    apply_opcode,
    fence,
    pcu_execute,
    pmu_dispatch,
)
from pimsim.trace import Fence, Load, Pei, PeiOpcode, Trace

CFG = MachineConfig()
OPS = [(PeiOpcode.ADD, 5), (PeiOpcode.ADD, -3), (PeiOpcode.MIN, 4), (PeiOpcode.MAX, 9)]


def fresh():
    return SystemState(CpuCache(8, 2))


def test_apply_opcode():
    assert apply_opcode(PeiOpcode.ADD, 2, 3) == 5
    assert apply_opcode(PeiOpcode.MIN, 2, -3) == -3
    assert apply_opcode(PeiOpcode.MAX, 2, -3) == 2


def test_add_wraps_at_64_bits():
    top = (1 << 63) - 1
    assert apply_opcode(PeiOpcode.ADD, top, 1) == -(1 << 63)
    assert sequential_pei(top, [(PeiOpcode.ADD, 1)]) == -(1 << 63)


@pytest.mark.parametrize("vaddr", [57, 63, 121])
def test_pei_may_not_span_lines(vaddr):
    with pytest.raises(ValueError, match="spans"):
        PeiOp(PeiOpcode.ADD, vaddr, 1)


def test_pei_at_line_end_is_fine():
    PeiOp(PeiOpcode.ADD, 56, 1)


def test_operand_must_fit_64_bits():
    with pytest.raises(ValueError):
        PeiOp(PeiOpcode.ADD, 0, 1 << 63)


def test_dispatch_follows_cache_residency():
    s = fresh()
    op = PeiOp(PeiOpcode.ADD, 3 * 64, 1, issuing_core=2)
    assert pmu_dispatch(op, 3 * 64, s, CFG) == ExecutionSite.memory(3)
    cpu_cached_access(s, 3, AccessKind.READ)
    assert pmu_dispatch(op, 3 * 64, s, CFG) == ExecutionSite.host(2)


def test_memory_side_execution_writes_back_dirty_copy_first():
    s = fresh()
    cpu_cached_access(s, 3, AccessKind.WRITE, 10)
    old = pcu_execute(PeiOp(PeiOpcode.ADD, 192, 5), ExecutionSite.memory(3), 3, s)
    assert old == 10
    assert s.memory.read(3) == 15 and 3 not in s.cache


def test_host_execution_leaves_line_modified():
    s = fresh()
    pcu_execute(PeiOp(PeiOpcode.MAX, 0, 7), ExecutionSite.host(0), 0, s)
    assert s.cache.state(0) is LineState.MODIFIED
    assert s.coherent_view()[0] == 7


def test_pmu_serializes_per_line():
    pmu = Pmu()
    pmu.issue(PeiOp(PeiOpcode.ADD, 0, 1), 0)
    pmu.issue(PeiOp(PeiOpcode.ADD, 0, 2), 0)
    pmu.issue(PeiOp(PeiOpcode.ADD, 64, 3), 1)
    assert pmu.ready_lines() == [0, 1]
    assert pmu.begin(0).operand == 1
    assert pmu.ready_lines() == [1]
    with pytest.raises(RuntimeError):
        pmu.begin(0)
    pmu.complete(0)
    assert pmu.begin(0).operand == 2
    assert pmu.outstanding(0) == 2


def test_fence_waits_for_in_flight_peis():
    assert fence(0, 100, [90, 130, 120]) == fence(0, 100, [130])
    r = fence(0, 100, [130], fence_cost=2)
    assert (r.done_at, r.stall) == (132, 30)
    assert fence(0, 100, []).stall == 0


def run_pmu(ops, site_of):
    s = fresh()
    pmu = Pmu()
    for opcode, operand in ops:
        pmu.issue(PeiOp(opcode, 0, operand), 0)
    pmu.run_to_completion(s, site_of)
    return s.coherent_view().get(0, 0)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_every_issue_order_matches_sequential(k):
    """Each permutation of up to four PEIs on one word, with the site flipping per op, equals serial execution."""
    for ops in itertools.permutations(OPS, k):
        for sites in itertools.product([SiteKind.HOST, SiteKind.MEMORY], repeat=k):
            it = iter(sites)
            site_of = lambda ln: ExecutionSite(next(it), 0)
            assert run_pmu(ops, site_of) == sequential_pei(0, ops)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.sampled_from(PeiOpcode), st.integers(-50, 50)), min_size=1, max_size=5))
def test_pmu_result_is_some_serial_order(ops):
    assert run_pmu(ops, lambda ln: ExecutionSite.memory(0)) in pei_serial_outcomes(0, ops)


# -- engine ----------------------------------------------------------------------

def pei_trace(n, addr=0x1000, extra=()):
    return Trace(0x10000, (), tuple([Pei(PeiOpcode.ADD, addr, 1)] * n) + tuple(extra), (), {})


def test_thousand_concurrent_adds():
    sim = Simulator(CFG, pei_trace(1000), Mechanism.FG)
    rep = sim.run()
    mem = sim.final_memory()
    assert list(mem.values()) == [1000]
    assert rep.counters["pei_host"] + rep.counters["pei_memory"] == 1000


def test_mixed_sites_in_engine():
    rng = random.Random(4)
    cpu = []
    for _ in range(200):
        cpu.append(Pei(PeiOpcode.ADD, 0x1000, 1) if rng.random() < 0.7 else Load(0x1000, 8))
    sim = Simulator(CFG, Trace(0x10000, (), tuple(cpu), (), {}), Mechanism.FG)
    rep = sim.run()
    assert rep.counters["pei_host"] > 0 and rep.counters["pei_memory"] > 0
    assert list(sim.final_memory().values()) == [sum(isinstance(e, Pei) for e in cpu)]


def test_fence_after_peis_stalls_until_done():
    plain = Simulator(CFG, pei_trace(50), Mechanism.FG).run()
    fenced = Simulator(CFG, pei_trace(50, extra=[Fence()]), Mechanism.FG).run()
    assert fenced.total_cycles >= plain.total_cycles + CFG.lat_fence
