"""PIM-enabled instructions: PCUs at the host and in every vault, a PMU that
picks the execution site and serializes PEIs per cache line.

A PEI operates on one 8-byte word inside a single cache line. The memory model
keeps one integer per line, so a PEI reads and updates that value.
"""

from __future__ import annotations

import enum
from collections import defaultdict, deque
from dataclasses import dataclass

from .coherence import AccessKind, CoherenceOutcome, LineState, SystemState, cpu_cached_access, flush_line
from .machine import MachineConfig, vault_of
from .trace import PeiOpcode

OPERAND_BYTES = 8
INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


def _wrap64(x: int) -> int:
    return (x + (1 << 63)) % (1 << 64) - (1 << 63)


@dataclass(frozen=True)
class PeiOp:
    opcode: PeiOpcode
    vaddr: int
    operand: int
    issuing_core: int = 0
    line_size: int = 64

    def __post_init__(self):
        if self.vaddr < 0:
            raise ValueError("negative address")
        if self.vaddr // self.line_size != (self.vaddr + OPERAND_BYTES - 1) // self.line_size:
            raise ValueError(f"PEI at {self.vaddr:#x} spans two cache lines")
        if not INT64_MIN <= self.operand <= INT64_MAX:
            raise ValueError("PEI operand must fit in 64 bits")


def apply_opcode(opcode: PeiOpcode, old: int, operand: int) -> int:
    if opcode is PeiOpcode.ADD:
        return _wrap64(old + operand)
    if opcode is PeiOpcode.MIN:
        return min(old, operand)
    if opcode is PeiOpcode.MAX:
        return max(old, operand)
    raise ValueError(f"unknown opcode {opcode!r}")


class SiteKind(str, enum.Enum):
    HOST = "host"
    MEMORY = "memory"


@dataclass(frozen=True)
class ExecutionSite:
    kind: SiteKind
    id: int

    @classmethod
    def host(cls, core_id: int) -> "ExecutionSite":
        return cls(SiteKind.HOST, core_id)

    @classmethod
    def memory(cls, vault_id: int) -> "ExecutionSite":
        return cls(SiteKind.MEMORY, vault_id)


def pmu_dispatch(op: PeiOp, paddr: int, state: SystemState, config: MachineConfig) -> ExecutionSite:
    """Run at the host PCU if the CPU caches the target line, else at the owning vault's PCU."""
    line = paddr // config.line_size
    if state.cache.get(line) is not None:
        return ExecutionSite.host(op.issuing_core)
    return ExecutionSite.memory(vault_of(paddr, config))


def pcu_execute(op: PeiOp, site: ExecutionSite, line: int, state: SystemState,
                out: CoherenceOutcome | None = None) -> int:
    """Apply ``op`` to ``line`` at ``site``; returns the value before the update."""
    out = out if out is not None else CoherenceOutcome()
    if site.kind is SiteKind.HOST:
        entry = state.cache.get(line)
        if entry is None:
            fill = cpu_cached_access(state, line, AccessKind.READ)
            out.dram_accesses += fill.dram_accesses
            out.channel_transfers += fill.channel_transfers
            entry = state.cache.get(line)
        else:
            out.cache_hit = True
            state.cache.touch(line)
        old = entry.value
        entry.value = apply_opcode(op.opcode, old, op.operand)
        entry.state = LineState.MODIFIED
        return old
    # Memory-side: the single CPU-cached copy (if any) must be written back first.
    flush_line(state, line, out, invalidate=True)
    old = state.memory.read(line)
    state.memory.write(line, apply_opcode(op.opcode, old, op.operand))
    out.dram_accesses += 1
    return old


class Pmu:
    """Per-line FIFO queues; at most one PEI per line is active at a time."""

    def __init__(self):
        self.queues: dict[int, deque[PeiOp]] = defaultdict(deque)
        self.active: dict[int, PeiOp] = {}
        self.in_flight: dict[int, int] = defaultdict(int)

    def issue(self, op: PeiOp, line: int) -> None:
        self.queues[line].append(op)
        self.in_flight[op.issuing_core] += 1

    def ready_lines(self) -> list[int]:
        return sorted(ln for ln, q in self.queues.items() if q and ln not in self.active)

    def begin(self, line: int) -> PeiOp:
        if line in self.active:
            raise RuntimeError(f"line {line:#x} already has an active PEI")
        q = self.queues.get(line)
        if not q:
            raise RuntimeError(f"no PEI queued for line {line:#x}")
        op = q.popleft()
        self.active[line] = op
        return op

    def complete(self, line: int) -> PeiOp:
        op = self.active.pop(line)
        self.in_flight[op.issuing_core] -= 1
        return op

    def pending(self, line: int) -> bool:
        return line in self.active or bool(self.queues.get(line))

    def outstanding(self, core: int) -> int:
        return self.in_flight.get(core, 0)

    def run_to_completion(self, state: SystemState, line_site) -> list[tuple[PeiOp, int]]:
        """Drain every queue in line order; ``line_site(line)`` gives the execution site."""
        results = []
        while True:
            lines = self.ready_lines()
            if not lines:
                return results
            for ln in lines:
                op = self.begin(ln)
                results.append((op, pcu_execute(op, line_site(ln), ln, state)))
                self.complete(ln)


@dataclass(frozen=True)
class FenceResult:
    done_at: int
    stall: int


def fence(issuing_core: int, now: int, pei_done_times: list[int], fence_cost: int = 1) -> FenceResult:
    """Block ``issuing_core`` until all of its in-flight PEIs have completed."""
    ready = max([now, *pei_done_times])
    return FenceResult(ready + fence_cost, ready - now)
