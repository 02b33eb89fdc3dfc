"""Deterministic discrete-event simulation of one CPU and one PIM execution context.

Timing is event-count based: every event has a fixed latency from the
machine config, agents are in order, and each agent has at most one
outstanding miss. Events are processed in (timestamp, agent id, sequence)
order; a memory event takes effect at its start time.

Offload semantics
-----------------
* Kernels in the trace's PIM stream always run on PIM.
* CPU-stream kernels listed in ``offload_plan`` are moved to PIM. They start
  as soon as PIM is free, but not before the CPU has passed every fence that
  precedes them in program order.
* A CPU fence waits for the CPU's in-flight PEIs and for every offloaded
  kernel that precedes it in program order.
* A fence in the PIM stream waits until the CPU has executed at least as
  many fences.
* ``Mechanism.CPU_ONLY`` ignores the plan and runs both streams on the CPU,
  CPU stream first.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

from .coherence import (
    AccessKind,
    Agent,
    CondaEpoch,
    CoherenceOutcome,
    CpuCache,
    Decision,
    Mechanism,
    RegionLocks,
    SystemState,
    cg_acquire,
    cg_cpu_access,
    cg_pim_access,
    cg_release,
    conda_record,
    conda_resolve,
    conda_rollback_and_reexecute,
    cpu_cached_access,
    fg_access,
    flush_line,
    ideal_access,
    nc_access,
)
from .machine import DATA_MOVEMENT_KINDS, EventKind, MachineConfig, PimCoreKind, check_config, vault_of
from .pei import ExecutionSite, PeiOp, Pmu, SiteKind, pcu_execute, pmu_dispatch
from .trace import (
    Compute,
    Fence,
    Granularity,
    KernelBegin,
    KernelEnd,
    Load,
    Pei,
    Store,
    Trace,
    TraceEvent,
)
from .xlat import PageMap, PageTableMode, TranslationFault, Tlb, make_walker, translate

SCHEMA_VERSION = 1
PCU_AGENT = 2

ACCEL_GRANULARITIES = frozenset({Granularity.BULK_OP, Granularity.FUNCTION})


class SimulationError(RuntimeError):
    def __init__(self, message: str, kernel: int | None = None, vaddr: int | None = None):
        self.kernel = kernel
        self.vaddr = vaddr
        super().__init__(message)


# -- energy ------------------------------------------------------------------

class EnergyLedger:
    """Energy per event kind, plus the raw event quantities it was computed from."""

    def __init__(self, energy_table: dict[EventKind, float]):
        self.per_event = {k: float(energy_table.get(k, 0.0)) for k in EventKind}
        self.quantity: dict[EventKind, float] = {k: 0 for k in EventKind}
        self.energy: dict[EventKind, float] = {k: 0.0 for k in EventKind}

    def account(self, kind: EventKind, quantity: float) -> "EnergyLedger":
        if quantity < 0:
            raise ValueError("quantity must be >= 0")
        if quantity:
            self.quantity[kind] += quantity
            self.energy[kind] += quantity * self.per_event[kind]
        return self

    @property
    def total(self) -> float:
        return sum(self.energy.values())

    @property
    def data_movement_total(self) -> float:
        return sum(self.energy[k] for k in DATA_MOVEMENT_KINDS)

    @property
    def data_movement_fraction(self) -> float:
        total = self.total
        return self.data_movement_total / total if total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "by_kind": {k.value: self.energy[k] for k in EventKind},
            "total": self.total,
            "data_movement_total": self.data_movement_total,
            "data_movement_fraction": self.data_movement_fraction,
        }


def account(kind: EventKind, quantity: float, ledger: EnergyLedger) -> EnergyLedger:
    return ledger.account(kind, quantity)


# -- report ------------------------------------------------------------------

COUNTER_NAMES = (
    "coherence_messages",
    "rollbacks",
    "page_walk_accesses",
    "tlb_misses",
    "offchip_bytes",
    "dram_accesses",
    "cache_hits",
    "cache_misses",
    "flushed_lines",
    "cg_stalls",
    "conda_epochs",
    "conda_fallbacks",
    "pei_host",
    "pei_memory",
    "pei_race_warnings",
    "kernels_offloaded",
)


@dataclass
class KernelStats:
    kernel_id: int
    name: str
    agent: str
    top_level: bool
    ledger: EnergyLedger
    start: int = -1
    end: int = -1
    instructions: int = 0
    dram_misses: int = 0
    executions: int = 0
    touched_lines: set[int] = field(default_factory=set)
    cpu_concurrent_lines: set[int] = field(default_factory=set)

    @property
    def cycles(self) -> int:
        return max(0, self.end - self.start) if self.start >= 0 else 0

    @property
    def mpki(self) -> float:
        return self.dram_misses * 1000.0 / self.instructions if self.instructions else 0.0

    @property
    def shared_lines(self) -> int:
        return len(self.touched_lines & self.cpu_concurrent_lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.kernel_id,
            "name": self.name,
            "agent": self.agent,
            "start": self.start,
            "end": self.end,
            "cycles": self.cycles,
            "executions": self.executions,
            "instructions": self.instructions,
            "dram_misses": self.dram_misses,
            "mpki": self.mpki,
            "touched_lines": len(self.touched_lines),
            "shared_lines": self.shared_lines,
            "energy_total": self.ledger.total,
            "energy_data_movement": self.ledger.data_movement_total,
        }


@dataclass
class MetricsReport:
    mechanism: str
    xlat_mode: str
    total_cycles: int
    ledger: EnergyLedger
    counters: dict[str, int]
    kernels: dict[int, KernelStats]
    config_digest: str
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def kernel_cycles(self) -> dict[int, int]:
        return {k: s.cycles for k, s in sorted(self.kernels.items())}

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA_VERSION,
            "mechanism": self.mechanism,
            "xlat_mode": self.xlat_mode,
            "config_digest": self.config_digest,
            **self.extra,
            "total_cycles": self.total_cycles,
            "counters": dict(self.counters),
            "energy": self.ledger.to_dict(),
            "kernels": [s.to_dict() for _, s in sorted(self.kernels.items())],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# -- simulation --------------------------------------------------------------

class Signal:
    __slots__ = ("fired", "waiters")

    def __init__(self):
        self.fired = False
        self.waiters: list = []


@dataclass
class _PimWork:
    kernel_id: int
    granularity: Granularity
    events: list[tuple[int, TraceEvent]]
    token_base: int
    gate: int  # CPU fences that must have passed before this kernel may start


def _token(stream_code: int, index: int) -> int:
    return (stream_code << 40) | (index + 1)


CPU_STREAM, PIM_STREAM = 1, 2


class Simulator:
    def __init__(
        self,
        config: MachineConfig,
        trace: Trace,
        mechanism: Mechanism | str = Mechanism.FG,
        offload_plan: Iterable[int] | None = None,
        xlat_mode: PageTableMode | str = PageTableMode.CONVENTIONAL_4LEVEL,
        mapping_seed: int = 0,
    ):
        self.config = check_config(config)
        self.trace = trace.validate()
        self.mechanism = Mechanism(mechanism)
        self.xlat_mode = PageTableMode(xlat_mode)
        self.offload_plan = frozenset(offload_plan or ())
        unknown = self.offload_plan - set(trace.kernel_ids())
        if unknown:
            raise SimulationError(f"offload plan names unknown kernels {sorted(unknown)}")

        L = config.line_size
        self.L = L
        self.state = SystemState(CpuCache(config.cpu_cache_lines, config.cpu_cache_ways))
        page_map = PageMap(mapping_seed)
        self.cpu_walker = make_walker(PageTableMode.CONVENTIONAL_4LEVEL, page_map)
        self.pim_walker = make_walker(self.xlat_mode, page_map, trace.regions)
        self.cpu_tlb = Tlb(config.tlb_entries)
        self.pim_tlb = Tlb(config.tlb_entries)
        self.locks = RegionLocks()
        self.pmu = Pmu()
        self.ledger = EnergyLedger(dict(config.energy))
        self.counters = {name: 0 for name in COUNTER_NAMES}
        self.kernels: dict[int, KernelStats] = {}
        self.p2v: dict[int, int] = {}

        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.finish = 0
        self.cpu_fences = 0
        self.fence_signal = Signal()
        self.kernel_signal: dict[int, Signal] = {}
        self.release_signal: dict[int, Signal] = {}
        self.pei_done: list[int] = []
        self.line_free: dict[int, int] = {}
        self.pim_buffers: dict[int, int] = {}  # vault -> line held in its buffer
        self.epoch: CondaEpoch | None = None
        self.epoch_cpu_reads: set[int] = set()
        self._stall_lat = 0
        self.active_pim_kernels: list[KernelStats] = []
        self.cpu_stack: list[KernelStats] = []
        self.pim_stack: list[KernelStats] = []

        self._prepare()

    # -- program preparation --------------------------------------------------

    def _stats(self, kid: int, agent: str, top: bool) -> KernelStats:
        st = KernelStats(kid, self.trace.kernel_names.get(kid, f"k{kid}"), agent, top, EnergyLedger(dict(self.config.energy)))
        self.kernels[kid] = st
        return st

    def _prepare(self) -> None:
        cpu_items: list[tuple[int, int, TraceEvent]] = []  # (stream code, index, event)
        self.pim_stream_work: list[_PimWork | int] = []  # ints are PIM-stream fence ordinals
        self.offload_work: list[_PimWork] = []
        self.fence_waits: list[list[int]] = []

        if self.mechanism is Mechanism.CPU_ONLY:
            cpu_items = [(CPU_STREAM, i, ev) for i, ev in enumerate(self.trace.cpu)]
            cpu_items += [(PIM_STREAM, i, ev) for i, ev in enumerate(self.trace.pim)]
        else:
            fences = 0
            pending: list[int] = []
            i = 0
            cpu = self.trace.cpu
            while i < len(cpu):
                ev = cpu[i]
                if isinstance(ev, KernelBegin) and ev.kernel_id in self.offload_plan:
                    j = self._kernel_end(cpu, i)
                    self.offload_work.append(
                        _PimWork(ev.kernel_id, ev.granularity, list(enumerate(cpu[i : j + 1], start=i)), CPU_STREAM, fences)
                    )
                    pending.append(ev.kernel_id)
                    i = j + 1
                    continue
                if isinstance(ev, Fence):
                    self.fence_waits.append(pending)
                    pending = []
                    fences += 1
                cpu_items.append((CPU_STREAM, i, ev))
                i += 1
            self.final_waits = pending
            pim = self.trace.pim
            i = 0
            pim_fences = 0
            while i < len(pim):
                ev = pim[i]
                if isinstance(ev, Fence):
                    pim_fences += 1
                    self.pim_stream_work.append(pim_fences)
                    i += 1
                elif isinstance(ev, KernelBegin):
                    j = self._kernel_end(pim, i)
                    self.pim_stream_work.append(
                        _PimWork(ev.kernel_id, ev.granularity, list(enumerate(pim[i : j + 1], start=i)), PIM_STREAM, 0)
                    )
                    i = j + 1
                else:  # stray KernelEnd cannot happen in a validated trace
                    i += 1
            for w in self.offload_work + [w for w in self.pim_stream_work if isinstance(w, _PimWork)]:
                self.kernel_signal[w.kernel_id] = Signal()
                self._check_accel(w)
        self.cpu_items = cpu_items

    @staticmethod
    def _kernel_end(stream: tuple[TraceEvent, ...], i: int) -> int:
        kid = stream[i].kernel_id
        for j in range(i + 1, len(stream)):
            if isinstance(stream[j], KernelEnd) and stream[j].kernel_id == kid:
                return j
        raise SimulationError(f"kernel {kid} never ends", kernel=kid)

    def _check_accel(self, w: _PimWork) -> None:
        if self.config.pim_core_kind is PimCoreKind.FIXED_ACCELERATOR and w.granularity not in ACCEL_GRANULARITIES:
            raise SimulationError(
                f"kernel {w.kernel_id} ({w.granularity.value}) cannot run on a fixed-function accelerator",
                kernel=w.kernel_id,
            )

    # -- event loop -------------------------------------------------------------

    def _push(self, t: int, agent: int, gen: Iterator) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, agent, self._seq, gen))

    def _fire(self, sig: Signal) -> None:
        sig.fired = True
        for agent, gen in sig.waiters:
            self._push(self.now, agent, gen)
        sig.waiters.clear()

    def run(self) -> MetricsReport:
        self._push(0, Agent.CPU, self._cpu_agent())
        if self.mechanism is not Mechanism.CPU_ONLY:
            self._push(0, Agent.PIM, self._pim_agent())
        heap = self._heap
        while heap:
            t, agent, _, gen = heapq.heappop(heap)
            self.now = t
            try:
                cmd = next(gen)
                # Keep running this agent while it would be popped next anyway.
                while type(cmd) is int and (not heap or (t + cmd, agent) < heap[0][:2]):
                    t += cmd
                    self.now = t
                    cmd = next(gen)
            except StopIteration:
                self.finish = max(self.finish, t)
                continue
            if type(cmd) is int:
                self._push(t + cmd, agent, gen)
            elif cmd.fired:
                self._push(t, agent, gen)
            else:
                cmd.waiters.append((agent, gen))
        if any(s.waiters for s in self.kernel_signal.values()) or self.fence_signal.waiters:
            raise SimulationError("deadlock: agents left waiting at end of simulation")
        return self.report()

    def report(self) -> MetricsReport:
        return MetricsReport(
            mechanism=self.mechanism.value,
            xlat_mode=self.xlat_mode.value,
            total_cycles=self.finish,
            ledger=self.ledger,
            counters=dict(self.counters),
            kernels=dict(self.kernels),
            config_digest=self.config.digest(),
        )

    # -- accounting -------------------------------------------------------------

    def _charge(self, kind: EventKind, qty: float, stack: list[KernelStats]) -> None:
        if not qty:
            return
        led = self.ledger
        e = qty * led.per_event[kind]
        led.quantity[kind] += qty
        led.energy[kind] += e
        if stack:
            led = stack[-1].ledger
            led.quantity[kind] += qty
            led.energy[kind] += e

    def _charge_outcome(self, out: CoherenceOutcome, stack: list[KernelStats]) -> None:
        c = self.counters
        c["dram_accesses"] += out.dram_accesses
        c["coherence_messages"] += out.messages_on_channel
        c["offchip_bytes"] += out.channel_transfers * self.L
        c["flushed_lines"] += len(out.flushed_lines)
        self._charge(EventKind.DRAM_ACCESS, out.dram_accesses, stack)
        self._charge(EventKind.CHANNEL_TRANSFER, out.channel_transfers, stack)
        self._charge(EventKind.COHERENCE_MESSAGE, out.messages_on_channel, stack)

    def _translate(self, vaddr: int, agent: Agent, stack: list[KernelStats]) -> tuple[int, int]:
        """Return (paddr, walk latency)."""
        cfg = self.config
        try:
            if agent is Agent.CPU:
                tr = translate(vaddr, self.cpu_walker, self.cpu_tlb)
            else:
                tr = translate(vaddr, self.pim_walker, self.pim_tlb)
        except TranslationFault:
            kid = stack[-1].kernel_id if stack else None
            raise SimulationError(
                f"translation fault: kernel {kid} accessed {vaddr:#x} outside every PIM region",
                kernel=kid,
                vaddr=vaddr,
            ) from None
        if tr.tlb_hit:
            return tr.paddr, 0
        self.counters["tlb_misses"] += 1
        self.counters["page_walk_accesses"] += tr.walk_accesses
        self.counters["dram_accesses"] += tr.walk_accesses
        self._charge(EventKind.DRAM_ACCESS, tr.walk_accesses, stack)
        per = cfg.lat_dram_local_vault + (cfg.lat_channel_round_trip if agent is Agent.CPU else 0)
        return tr.paddr, tr.walk_accesses * per

    def _lines(self, vaddr: int, nbytes: int) -> range:
        return range(vaddr // self.L, (vaddr + nbytes - 1) // self.L + 1)

    # -- CPU --------------------------------------------------------------------

    def _cpu_agent(self) -> Iterator:
        cfg = self.config
        stack = self.cpu_stack
        fence_no = 0
        L = self.L
        access = self._cpu_access
        for code, idx, ev in self.cpu_items:
            t = type(ev)
            if t is Load or t is Store:
                kind = AccessKind.READ if t is Load else AccessKind.WRITE
                value = _token(code, idx) if t is Store else None
                first = ev.vaddr // L
                lat = 0
                for vline in range(first, (ev.vaddr + ev.bytes - 1) // L + 1):
                    r = access(vline, kind, value, stack)
                    while type(r) is not int:  # CG stall: wait for the region release, then retry
                        yield r
                        r = access(vline, kind, value, stack)
                    lat += r
                yield lat
                if stack:
                    stack[-1].instructions += 1
            elif t is Compute:
                self._charge(EventKind.CPU_COMPUTE, ev.cycles, stack)
                if stack:
                    stack[-1].instructions += 1
                if ev.cycles:
                    yield ev.cycles
            elif t is KernelBegin:
                st = self._stats(ev.kernel_id, "cpu", not stack)
                st.start = self.now
                st.executions = 1
                stack.append(st)
            elif t is KernelEnd:
                st = stack.pop()
                st.end = self.now
            elif t is Pei:
                yield self._cpu_pei(ev, stack)
                if stack:
                    stack[-1].instructions += 1
            elif t is Fence:
                if self.pei_done:
                    ready = max(self.pei_done)
                    self.pei_done.clear()
                    if ready > self.now:
                        yield ready - self.now
                if self.mechanism is not Mechanism.CPU_ONLY:
                    for kid in self.fence_waits[fence_no]:
                        sig = self.kernel_signal[kid]
                        if not sig.fired:
                            yield sig
                    fence_no += 1
                    self.cpu_fences += 1
                    old, self.fence_signal = self.fence_signal, Signal()
                    self._fire(old)
                yield cfg.lat_fence
        if self.pei_done and max(self.pei_done) > self.now:
            yield max(self.pei_done) - self.now
        if self.mechanism is not Mechanism.CPU_ONLY:
            for kid in self.final_waits:
                sig = self.kernel_signal[kid]
                if not sig.fired:
                    yield sig

    def _cpu_access(self, vline: int, kind: AccessKind, value: int | None, stack: list[KernelStats]) -> int | Signal:
        """Perform one line access; returns its latency, or a Signal to wait on before retrying."""
        cfg = self.config
        vaddr = vline * self.L
        paddr, lat = self._translate(vaddr, Agent.CPU, stack)
        lat += self._stall_lat
        self._stall_lat = 0
        line = paddr // self.L
        self.p2v[line] = vline
        region = self.trace.region_of(vaddr)
        if region is not None:
            self.state.line_region[line] = region
        mech = self.mechanism

        if region is None:
            out = cpu_cached_access(self.state, line, kind, value)
            bypass = False
        elif mech is Mechanism.NC:
            out = nc_access(Agent.CPU, line, kind, self.state, value)
            bypass = True
        elif mech is Mechanism.CG:
            bypass = self.locks.held_by(region) is Agent.PIM
            out = cg_cpu_access(line, kind, self.state, self.locks, value)
            if out.decision is Decision.STALL:
                self.counters["cg_stalls"] += 1
                self._stall_lat = lat
                return self.release_signal.setdefault(region, Signal())
        else:
            out = cpu_cached_access(self.state, line, kind, value)
            bypass = False

        if kind is AccessKind.READ:
            if self.pmu.queues and self.pmu.pending(line):
                self.counters["pei_race_warnings"] += 1
            if self.epoch is not None and region is not None:
                self.epoch_cpu_reads.add(line)
        for k in self.active_pim_kernels:
            k.cpu_concurrent_lines.add(vline)
        if stack:
            stack[-1].touched_lines.add(vline)

        if out.dram_accesses or out.messages_on_channel:
            self._charge_outcome(out, stack)
        if bypass:
            # the tag lookup still happens before the access goes off-chip
            lat += cfg.lat_cpu_cache_hit + cfg.lat_channel_round_trip + cfg.lat_dram_local_vault
            if stack:
                stack[-1].dram_misses += 1
        else:
            self._charge(EventKind.CACHE_ACCESS, 1, stack)
            lat += cfg.lat_cpu_cache_hit
            if out.cache_hit:
                self.counters["cache_hits"] += 1
            else:
                self.counters["cache_misses"] += 1
                lat += cfg.lat_channel_round_trip + cfg.lat_dram_local_vault
                if stack:
                    stack[-1].dram_misses += 1
        return lat

    def _cpu_pei(self, ev: Pei, stack: list[KernelStats]) -> int:
        cfg = self.config
        try:
            op = PeiOp(ev.opcode, ev.vaddr, ev.operand, 0, self.L)
        except ValueError as exc:
            raise SimulationError(str(exc), vaddr=ev.vaddr) from None
        paddr, lat = self._translate(ev.vaddr, Agent.CPU, stack)
        line = paddr // self.L
        self.p2v[line] = ev.vaddr // self.L
        region = self.trace.region_of(ev.vaddr)
        if region is not None:
            self.state.line_region[line] = region
        if self.mechanism is Mechanism.CPU_ONLY:
            site = ExecutionSite.host(0)
        elif self.pmu.pending(line):
            site = ExecutionSite.memory(vault_of(paddr, cfg))
        else:
            site = pmu_dispatch(op, paddr, self.state, cfg)

        if site.kind is SiteKind.HOST:
            self.counters["pei_host"] += 1
            out = CoherenceOutcome()
            pcu_execute(op, site, line, self.state, out)
            self._charge_outcome(out, stack)
            self._charge(EventKind.CACHE_ACCESS, 1, stack)
            self._charge(EventKind.CPU_COMPUTE, cfg.lat_pcu_op, stack)
            lat += cfg.lat_cpu_cache_hit + cfg.lat_pcu_op
            if out.dram_accesses:
                lat += cfg.lat_channel_round_trip + cfg.lat_dram_local_vault
            return lat

        self.counters["pei_memory"] += 1
        self.pmu.issue(op, line)
        self.counters["offchip_bytes"] += 16  # request packet: address + operand
        half = cfg.lat_channel_round_trip // 2
        start = max(self.now + lat + half, self.line_free.get(line, 0))
        done = start + cfg.lat_dram_local_vault + cfg.lat_pcu_op
        self.line_free[line] = done
        self.pei_done.append(done + half)
        self._push(start, PCU_AGENT, self._pcu_exec(line, site, done - start, stack[-1] if stack else None))
        return lat + 1

    def _pcu_exec(self, line: int, site: ExecutionSite, duration: int, kstat: KernelStats | None) -> Iterator:
        # The update lands atomically when the op's slot on the line ends; slots never overlap.
        yield duration
        stack = [kstat] if kstat else []
        op = self.pmu.begin(line)
        out = CoherenceOutcome()
        if self.state.cache.get(line) is not None:
            out.messages_on_channel += 2
        pcu_execute(op, site, line, self.state, out)
        self._charge_outcome(out, stack)
        self._charge(EventKind.PIM_COMPUTE, self.config.lat_pcu_op, stack)
        self.pmu.complete(line)

    # -- PIM --------------------------------------------------------------------

    def _pim_agent(self) -> Iterator:
        stream = list(self.pim_stream_work)
        offload = list(self.offload_work)
        while stream or offload:
            if stream and isinstance(stream[0], int):
                if self.cpu_fences >= stream[0]:
                    stream.pop(0)
                    continue
            elif stream:
                yield from self._pim_kernel(stream.pop(0))
                continue
            if offload and self.cpu_fences >= offload[0].gate:
                yield from self._pim_kernel(offload.pop(0))
                continue
            yield self.fence_signal

    def _kernel_regions(self, w: _PimWork) -> list[int]:
        regs = set()
        for _, ev in w.events:
            if isinstance(ev, (Load, Store)):
                r = self.trace.region_of(ev.vaddr)
                if r is not None:
                    regs.add(r)
        return sorted(regs)

    def _pim_kernel(self, w: _PimWork) -> Iterator:
        cfg = self.config
        stack = self.pim_stack
        top = self._stats(w.kernel_id, "pim", True)
        top.start = self.now
        self.counters["kernels_offloaded"] += 1
        self.active_pim_kernels.append(top)
        yield cfg.lat_channel_round_trip  # launch command
        regions = self._kernel_regions(w)
        use_cg = self.mechanism is Mechanism.CG
        compute_scale = cfg.pim_cycle_ratio
        if cfg.pim_core_kind is PimCoreKind.FIXED_ACCELERATOR:
            compute_scale *= cfg.accel_compute_scale

        while True:
            top.executions += 1
            self.pim_buffers.clear()
            conda = self.mechanism is Mechanism.CONDA and not use_cg
            if use_cg:
                for r in regions:
                    while True:
                        out = cg_acquire(Agent.PIM, r, self.state, self.locks)
                        if out.decision is Decision.STALL:  # only the CPU could hold it
                            yield self.release_signal.setdefault(r, Signal())
                            continue
                        break
                    self._charge_outcome(out, [top])
                    yield cfg.lat_channel_round_trip
            if conda:
                self.epoch = CondaEpoch.new(cfg.signature_bits, cfg.signature_hashes)
                self.epoch_cpu_reads = set()
                self.counters["conda_epochs"] += 1
                cleaned = self._conda_launch_clean(regions, top)
                if cleaned:
                    yield cfg.lat_channel_round_trip

            stack.clear()
            for idx, ev in w.events:
                t = type(ev)
                if t is Load or t is Store:
                    kind = AccessKind.READ if t is Load else AccessKind.WRITE
                    token = _token(w.token_base, idx)
                    lat = 0
                    for vline in self._lines(ev.vaddr, ev.bytes):
                        lat += self._pim_access(vline, kind, token, stack or [top], conda)
                    (stack or [top])[-1].instructions += 1
                    yield lat
                elif t is Compute:
                    cycles = math.ceil(ev.cycles * compute_scale)
                    self._charge(EventKind.PIM_COMPUTE, cycles, stack or [top])
                    (stack or [top])[-1].instructions += 1
                    if cycles:
                        yield cycles
                elif t is KernelBegin:
                    st = top if ev.kernel_id == w.kernel_id else self.kernels.get(ev.kernel_id) or self._stats(ev.kernel_id, "pim", False)
                    if st is not top and st.start < 0:
                        st.start = self.now
                    if st is not top:
                        st.executions += 1
                    stack.append(st)
                elif t is KernelEnd:
                    st = stack.pop()
                    if st is not top:
                        st.end = self.now
                elif t is Pei:
                    raise SimulationError(f"kernel {w.kernel_id}: PEIs cannot be offloaded inside a kernel", kernel=w.kernel_id)
                elif t is Fence:
                    pass

            if conda:
                # only region lines are speculated on; everything else went through FG
                lr = self.state.line_region
                dirty = {ln for ln in self.state.cache.dirty_lines() if ln in lr}
                res = conda_resolve(self.epoch, dirty, self.epoch_cpu_reads, self.state)
                out = CoherenceOutcome(
                    messages_on_channel=res.messages_on_channel,
                    dram_accesses=res.dram_accesses,
                    channel_transfers=res.channel_transfers,
                    flushed_lines=res.flushed,
                )
                self._charge_outcome(out, [top])
                yield cfg.lat_channel_round_trip
                if not res.committed:
                    self.counters["rollbacks"] += 1
                    conda_rollback_and_reexecute(self.epoch)
                    self.epoch = None
                    if top.executions > cfg.max_conda_rollbacks:
                        use_cg = True
                        self.counters["conda_fallbacks"] += 1
                    continue
                self.epoch = None
            if use_cg:
                for r in regions:
                    self._charge_outcome(cg_release(Agent.PIM, r, self.state, self.locks), [top])
                    sig = self.release_signal.pop(r, None)
                    if sig is not None:
                        self._fire(sig)
                yield cfg.lat_channel_round_trip
            break

        top.end = self.now
        self.active_pim_kernels.remove(top)
        self._fire(self.kernel_signal[w.kernel_id])

    def _conda_launch_clean(self, regions: list[int], top: KernelStats) -> int:
        """Write back (keep clean) CPU-dirty lines of the kernel's regions before speculation starts."""
        wanted = set(regions)
        dirty = sorted(
            ln for ln in self.state.cache.dirty_lines() if self.state.line_region.get(ln) in wanted
        )
        out = CoherenceOutcome()
        for ln in dirty:
            flush_line(self.state, ln, out, invalidate=False)
        out.flushed_lines = []
        self._charge_outcome(out, [top])
        return len(dirty)

    def _pim_access(self, vline: int, kind: AccessKind, token: int, stack: list[KernelStats], conda: bool) -> int:
        cfg = self.config
        vaddr = vline * self.L
        paddr, lat = self._translate(vaddr, Agent.PIM, stack)
        line = paddr // self.L
        self.p2v[line] = vline
        region = self.trace.region_of(vaddr)
        if region is not None:
            self.state.line_region[line] = region
        value = token if kind is AccessKind.WRITE else None
        mech = self.mechanism
        kstat = stack[-1]
        kstat.touched_lines.add(vline)
        for k in self.active_pim_kernels:
            k.touched_lines.add(vline)

        speculative_write = False
        if conda and region is not None:
            conda_record(self.epoch, line, kind, value)
            speculative_write = kind is AccessKind.WRITE
            out = CoherenceOutcome(dram_accesses=0 if speculative_write else 1)
        elif mech is Mechanism.FG:
            out = fg_access(Agent.PIM, line, kind, self.state, value)
        elif mech is Mechanism.IDEAL:
            out = ideal_access(Agent.PIM, line, kind, self.state, value)
        elif mech is Mechanism.NC and region is not None:
            out = nc_access(Agent.PIM, line, kind, self.state, value)
        elif (mech is Mechanism.CG or mech is Mechanism.CONDA) and region is not None and self.locks.held_by(region) is Agent.PIM:
            out = cg_pim_access(line, kind, self.state, value)
        else:
            out = fg_access(Agent.PIM, line, kind, self.state, value)

        vault = vault_of(paddr, cfg)
        buffer_hit = self.pim_buffers.get(vault) == line
        self.pim_buffers[vault] = line
        if buffer_hit:
            # the vault buffer absorbs the access; the memory value itself is already up to date.
            # A speculative write was never charged DRAM: it is written once at commit.
            if not speculative_write:
                out.dram_accesses -= 1
            self._charge(EventKind.CACHE_ACCESS, 1, stack)
            lat += cfg.lat_pim_buffer_hit
        else:
            home = kstat.kernel_id % cfg.num_vaults
            lat += cfg.lat_dram_local_vault if vault == home else cfg.lat_dram_remote_vault
            kstat.dram_misses += 1
        self._charge_outcome(out, stack)
        if out.messages_on_channel:
            lat += -(-out.messages_on_channel // 2) * cfg.lat_channel_round_trip
        return lat

    # -- results ----------------------------------------------------------------

    def final_memory(self) -> dict[int, int]:
        """Coherent memory contents keyed by virtual line number (zero-valued lines omitted)."""
        view = self.state.coherent_view()
        return {self.p2v[ln]: v for ln, v in view.items() if v}


def simulate(
    config: MachineConfig,
    trace: Trace,
    mechanism: Mechanism | str = Mechanism.FG,
    offload_plan: Iterable[int] | None = None,
    xlat_mode: PageTableMode | str = PageTableMode.CONVENTIONAL_4LEVEL,
    mapping_seed: int = 0,
) -> MetricsReport:
    return Simulator(config, trace, mechanism, offload_plan, xlat_mode, mapping_seed).run()


@dataclass
class ComparisonRow:
    mechanism: str
    report: MetricsReport
    speedup: float


def compare_mechanisms(
    config: MachineConfig,
    trace: Trace,
    offload_plan: Iterable[int] | None = None,
    xlat_mode: PageTableMode | str = PageTableMode.CONVENTIONAL_4LEVEL,
    mechanisms: Iterable[Mechanism] = (Mechanism.FG, Mechanism.CG, Mechanism.NC, Mechanism.CONDA, Mechanism.IDEAL),
) -> list[ComparisonRow]:
    """cpu-only first, then one row per mechanism; speedup = cpu-only cycles / row cycles."""
    plan = frozenset(offload_plan or ())
    base = simulate(config, trace, Mechanism.CPU_ONLY, plan, xlat_mode)
    rows = [ComparisonRow(Mechanism.CPU_ONLY.value, base, 1.0)]
    for mech in mechanisms:
        rep = simulate(config, trace, mech, plan, xlat_mode)
        rows.append(ComparisonRow(mech.value, rep, base.total_cycles / rep.total_cycles if rep.total_cycles else 1.0))
    return rows
