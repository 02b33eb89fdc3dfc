import dataclasses
import random

import pytest
from hypothesis import given, settings, strategies as st

from pimsim import MachineConfig, Mechanism, Simulator, SimulationError, compare_mechanisms, simulate
from pimsim.coherence import AccessKind
from pimsim.engine import COUNTER_NAMES, EnergyLedger, account
from pimsim.machine import DATA_MOVEMENT_KINDS, EventKind, PimCoreKind
from pimsim.oracle import allowed_final_memories, as_memory, random_small_trace
from pimsim.trace import Compute, Fence, Granularity, KernelBegin, KernelEnd, Load, Pei, PeiOpcode, Region, Site, Store, Trace
from pimsim.workloads import (
    gen_gemm_pipeline_trace,
    gen_pointer_chase_trace,
    gen_quantize_trace,
    gen_shared_trace,
    pim_kernel_ids,
)

CFG = MachineConfig()
PIM_MECHS = [Mechanism.FG, Mechanism.CG, Mechanism.NC, Mechanism.CONDA, Mechanism.IDEAL]


def cycles(rows):
    return {r.mechanism: r.report.total_cycles for r in rows}


def fenced(t):
    """CPU phase, then the PIM phase: the two agents never overlap."""
    return dataclasses.replace(t, cpu=t.cpu + (Fence(),), pim=(Fence(),) + t.pim)


# -- ledger ---------------------------------------------------------------------

def test_ledger_accounts_quantity_times_cost():
    led = EnergyLedger({EventKind.DRAM_ACCESS: 2.5, EventKind.CPU_COMPUTE: 1.0})
    account(EventKind.DRAM_ACCESS, 4, led)
    led.account(EventKind.CPU_COMPUTE, 3)
    assert led.total == 13.0
    assert led.data_movement_total == 10.0
    with pytest.raises(ValueError):
        led.account(EventKind.CPU_COMPUTE, -1)


# -- basics --------------------------------------------------------------------

def test_empty_trace():
    rep = simulate(CFG, Trace(0x1000, (), (), (), {}))
    assert rep.total_cycles == 0
    assert all(rep.counters[c] == 0 for c in COUNTER_NAMES)
    assert rep.ledger.total == 0


def test_reports_are_deterministic():
    t = gen_shared_trace(600, 0.2, seed=3)
    a = simulate(CFG, t, "conda").to_json()
    b = simulate(CFG, t, "conda").to_json()
    assert a == b


@pytest.mark.parametrize("mech", list(Mechanism))
def test_energy_is_conserved(mech):
    rep = simulate(CFG, gen_shared_trace(500, 0.3, seed=2), mech)
    led = rep.ledger
    for kind, qty in led.quantity.items():
        assert led.energy[kind] == pytest.approx(qty * CFG.energy_of(kind))
    assert led.total == pytest.approx(sum(led.energy.values()))
    assert led.data_movement_total == pytest.approx(sum(led.energy[k] for k in DATA_MOVEMENT_KINDS if k in led.energy))
    assert sum(k.ledger.total for k in rep.kernels.values() if k.top_level) <= led.total + 1e-6


def test_kernel_cycles_never_exceed_total():
    t = gen_gemm_pipeline_trace(2, matrix_elems=512)
    rep = simulate(CFG, t, "fg", pim_kernel_ids(t))
    assert rep.kernels
    for k in rep.kernels.values():
        assert 0 <= k.cycles <= rep.total_cycles
        assert k.start >= 0 and k.end <= rep.total_cycles


def test_unknown_offload_id():
    with pytest.raises(SimulationError, match="unknown"):
        Simulator(CFG, gen_quantize_trace(4), "fg", {99})


def test_region_translation_fault_names_kernel_and_address():
    stray = 0x9000
    t = Trace(0x10000, (Region(0x1000, 0x2000),), (),
              (KernelBegin(5), Load(0x1000, 8), Load(stray, 8), KernelEnd(5)), {5: "k"})
    with pytest.raises(SimulationError) as err:
        simulate(CFG, t, "fg", xlat_mode="region")
    assert err.value.kernel == 5 and err.value.vaddr == stray
    simulate(CFG, t, "fg")  # conventional tables map everything


def test_pei_inside_offloaded_kernel_is_rejected():
    t = Trace(0x10000, (), (KernelBegin(1), Pei(PeiOpcode.ADD, 0, 1), KernelEnd(1)), (), {1: "p"})
    simulate(CFG, t, "fg")  # fine on the CPU
    with pytest.raises(SimulationError):
        simulate(CFG, t, "fg", {1})


@pytest.mark.parametrize("gran, ok", [(Granularity.INSTRUCTION, False), (Granularity.BULK_OP, True),
                                      (Granularity.FUNCTION, True)])
def test_fixed_accelerator_granularity(gran, ok):
    cfg = MachineConfig(pim_core_kind=PimCoreKind.FIXED_ACCELERATOR)
    t = Trace(0x10000, (), (KernelBegin(1, gran), Load(0, 8), KernelEnd(1)), (), {1: "k"})
    if ok:
        assert simulate(cfg, t, "fg", {1}).counters["kernels_offloaded"] == 1
    else:
        with pytest.raises(SimulationError) as err:
            simulate(cfg, t, "fg", {1})
        assert err.value.kernel == 1


def test_cpu_only_ignores_offload_plan():
    t = gen_quantize_trace(200)
    assert simulate(CFG, t, "cpu-only", {0}).to_json() == simulate(CFG, t, "cpu-only").to_json()


def test_region_walks_cheaper_than_conventional():
    t = gen_pointer_chase_trace(800, seed=1)
    conv = simulate(CFG, t, "ideal")
    reg = simulate(CFG, t, "ideal", xlat_mode="region")
    assert reg.counters["page_walk_accesses"] < conv.counters["page_walk_accesses"]
    assert reg.total_cycles < conv.total_cycles


# -- safety against the interleaving oracle --------------------------------------------

def run_safety(seeds):
    bad = []
    for s in seeds:
        rng = random.Random(s)
        t = random_small_trace(rng, region_lines=None if rng.random() < 0.7 else rng.randint(0, 4))
        cfg = MachineConfig(cpu_cache_lines=rng.choice([1, 2, 4]), cpu_cache_ways=1,
                            lat_dram_local_vault=rng.randint(1, 40), lat_channel_round_trip=rng.randint(1, 100))
        loose = allowed_final_memories(t)
        atomic = allowed_final_memories(t, atomic_kernels=True)
        whole = len(t.regions) == 1 and t.regions[0].bound - t.regions[0].base >= 4 * 64
        for m in Mechanism:
            sim = Simulator(cfg, t, m, mapping_seed=s)
            sim.run()
            got = as_memory(sim.final_memory())
            if got not in (atomic if m is Mechanism.CONDA and whole else loose):
                bad.append((s, m))
    return bad


def test_final_memory_is_a_legal_interleaving():
    assert run_safety(range(300)) == []


def test_oracle_catches_a_lost_write(monkeypatch):
    # Sanity check that the harness can fail: drop every PIM store.
    import pimsim.engine as eng

    real = eng.Simulator._pim_access

    def lossy(self, vline, kind, *a, **kw):
        return real(self, vline, AccessKind.READ, *a, **kw)

    monkeypatch.setattr(eng.Simulator, "_pim_access", lossy)
    assert run_safety(range(100))


# -- performance relations ---------------------------------------------------------

def test_quantize_is_data_movement_dominated():
    rep = simulate(CFG, gen_quantize_trace(20_000), "cpu-only")
    assert rep.ledger.data_movement_fraction >= 0.5


def test_offloading_quantize_saves_energy_and_time():
    t = gen_quantize_trace(2000)
    base, pim = simulate(CFG, t, "cpu-only"), simulate(CFG, t, "ideal", {0})
    assert pim.ledger.total < base.ledger.total
    assert pim.total_cycles < base.total_cycles
    assert pim.counters["offchip_bytes"] < base.counters["offchip_bytes"]


@pytest.mark.parametrize("make, plan", [
    (lambda: gen_shared_trace(1500, 0.0, 1), ()),
    (lambda: gen_shared_trace(1500, 0.3, 2), ()),
    (lambda: gen_shared_trace(1500, 1.0, 3), ()),
    (lambda: gen_quantize_trace(2000), {0}),
    (lambda: gen_pointer_chase_trace(400, 2), ()),
])
def test_ideal_is_fastest_on_workloads(make, plan):
    c = cycles(compare_mechanisms(CFG, make(), plan))
    assert all(c["ideal"] <= v for m, v in c.items() if m != "cpu-only")


def test_conda_no_sharing_no_rollbacks():
    rep = simulate(CFG, gen_shared_trace(2000, 0.0, 4), "conda")
    assert rep.counters["rollbacks"] == 0
    assert rep.counters["conda_epochs"] >= 1


def test_conda_beats_fg_under_low_sharing():
    t = gen_shared_trace(2000, 0.05, 5)
    c = cycles(compare_mechanisms(CFG, t, mechanisms=[Mechanism.FG, Mechanism.CONDA, Mechanism.IDEAL]))
    assert c["ideal"] <= c["conda"] <= c["fg"]


def test_conda_falls_back_after_repeated_rollbacks():
    t = gen_shared_trace(1500, 1.0, 6)
    cfg = dataclasses.replace(CFG, max_conda_rollbacks=0)
    rep = simulate(cfg, t, "conda")
    if rep.counters["rollbacks"]:
        assert rep.counters["conda_fallbacks"] >= 1


def test_cg_stalls_cpu_writes_into_a_held_region():
    # PIM holds the region for a long kernel while the CPU stores into it.
    base = 0x10000
    pim = (KernelBegin(0), Load(base, 8), Compute(Site.PIM, 5000), Store(base, 8), KernelEnd(0))
    cpu = (Compute(Site.CPU, 200), Store(base + 64, 8), Load(base + 128, 8))
    t = Trace(0x20000, (Region(base, base + 4096),), cpu, pim, {0: "k"})
    rep = simulate(CFG, t, "cg")
    assert rep.counters["cg_stalls"] >= 1
    assert rep.total_cycles >= 5000


def test_gemm_speedup_grows_with_pipeline_depth():
    # Matrices must overflow the CPU cache; below 256 lines the CPU wins outright.
    def speedup(n):
        t = gen_gemm_pipeline_trace(n)
        plan = pim_kernel_ids(t)
        return simulate(CFG, t, "cpu-only").total_cycles / simulate(CFG, t, "ideal", plan).total_cycles

    s = [speedup(n) for n in (1, 2)]
    assert 1.0 < s[0] <= s[1]


def test_small_gemm_stays_on_cpu_side_of_the_cache_cliff():
    t = gen_gemm_pipeline_trace(1, matrix_elems=1024)
    assert simulate(CFG, t, "cpu-only").total_cycles < simulate(CFG, t, "ideal", pim_kernel_ids(t)).total_cycles


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 200), st.integers(1, 200))
def test_longer_round_trip_never_speeds_up_phased_fg(seed, rt, extra):
    t = fenced(random_small_trace(random.Random(seed)))
    fast = simulate(dataclasses.replace(CFG, lat_channel_round_trip=rt), t, "fg").total_cycles
    slow = simulate(dataclasses.replace(CFG, lat_channel_round_trip=rt + extra), t, "fg").total_cycles
    assert slow >= fast


@pytest.mark.parametrize("make", [lambda: gen_shared_trace(1200, 0.2, 8), lambda: gen_quantize_trace(1500)])
def test_longer_round_trip_never_speeds_up_fg_workloads(make):
    t = make()
    plan = pim_kernel_ids(t) or ({0} if not t.pim else ())
    prev = 0
    for rt in (20, 60, 120, 300):
        c = simulate(dataclasses.replace(CFG, lat_channel_round_trip=rt), t, "fg", plan).total_cycles
        assert c >= prev
        prev = c


# -- PEI integration -----------------------------------------------------------------

def test_load_racing_a_pending_pei_is_counted():
    cpu = (Pei(PeiOpcode.ADD, 0x100, 1), Load(0x100, 8), Fence(), Load(0x100, 8))
    rep = simulate(CFG, Trace(0x1000, (), cpu, (), {}), "fg")
    assert rep.counters["pei_race_warnings"] == 1
    assert rep.counters["pei_memory"] == 1
