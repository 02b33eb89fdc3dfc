"""Brute-force reference models used to check the simulator.

Nothing here shares code with the engine's coherence or signature logic:
final memories come from enumerating every interleaving of the two agents'
program-order write sequences, and the Bloom estimate is the closed form.
"""

from __future__ import annotations

import itertools
import math
import random
from functools import lru_cache
from typing import Iterable, Sequence

from .trace import Compute, Granularity, KernelBegin, KernelEnd, Load, PeiOpcode, Region, Site, Store, Trace

Write = tuple[int, int]  # (virtual line, value)
Memory = frozenset  # of (line, value) pairs, zero-valued lines omitted

CPU_CODE, PIM_CODE = 1, 2


def token(stream_code: int, index: int) -> int:
    """Value stored by event ``index`` of a stream; must agree with the engine's tokens."""
    return (stream_code << 40) | (index + 1)


def _writes_of(events: Sequence, code: int, line_size: int) -> list[list[Write]]:
    """Writes grouped per kernel; writes outside any kernel form singleton groups."""
    groups: list[list[Write]] = []
    current: list[Write] | None = None
    depth = 0
    for i, ev in enumerate(events):
        if isinstance(ev, KernelBegin):
            if depth == 0:
                current = []
            depth += 1
        elif isinstance(ev, KernelEnd):
            depth -= 1
            if depth == 0:
                groups.append(current)
                current = None
        elif isinstance(ev, Store):
            ws = _store_writes(ev, i, code, line_size)
            if current is None:
                groups.append(ws)
            else:
                current.extend(ws)
    return [g for g in groups if g]


def agent_writes(trace: Trace, offload_plan: Iterable[int] = (), line_size: int = 64) -> tuple[list[list[Write]], list[list[Write]]]:
    """(CPU write groups, PIM write groups) in program order, honouring the offload plan."""
    plan = set(offload_plan)
    cpu_groups: list[list[Write]] = []
    pim_groups: list[list[Write]] = []
    events = trace.cpu
    i = 0
    while i < len(events):
        ev = events[i]
        if isinstance(ev, KernelBegin) and ev.kernel_id in plan:
            j = i + 1
            while not (isinstance(events[j], KernelEnd) and events[j].kernel_id == ev.kernel_id):
                j += 1
            block = [w for k in range(i + 1, j) for w in _store_writes(events[k], k, CPU_CODE, line_size)]
            if block:
                pim_groups.append(block)
            i = j + 1
            continue
        for w in _store_writes(ev, i, CPU_CODE, line_size):
            cpu_groups.append([w])
        i += 1
    pim_groups += _writes_of(trace.pim, PIM_CODE, line_size)
    return cpu_groups, pim_groups


def _store_writes(ev, i: int, code: int, line_size: int) -> list[Write]:
    if not isinstance(ev, Store):
        return []
    first, last = ev.vaddr // line_size, (ev.vaddr + ev.bytes - 1) // line_size
    return [(ln, token(code, i)) for ln in range(first, last + 1)]


def _apply(mem: tuple, writes: Sequence[Write]) -> tuple:
    d = dict(mem)
    for ln, v in writes:
        d[ln] = v
    return tuple(sorted((k, v) for k, v in d.items() if v))


def interleaving_outcomes(a: Sequence[Sequence[Write]], b: Sequence[Sequence[Write]]) -> set[Memory]:
    """Every final memory reachable by interleaving the step sequences ``a`` and ``b``.

    Each step is a group of writes applied atomically. Pass singleton groups
    for fully fine-grained interleaving.
    """
    a = tuple(tuple(g) for g in a)
    b = tuple(tuple(g) for g in b)

    @lru_cache(maxsize=None)
    def go(i: int, j: int, mem: tuple) -> frozenset:
        if i == len(a) and j == len(b):
            return frozenset({mem})
        out: set = set()
        if i < len(a):
            out |= go(i + 1, j, _apply(mem, a[i]))
        if j < len(b):
            out |= go(i, j + 1, _apply(mem, b[j]))
        return frozenset(out)

    return {frozenset(m) for m in go(0, 0, ())}


def allowed_final_memories(trace: Trace, offload_plan: Iterable[int] = (), atomic_kernels: bool = False,
                           line_size: int = 64) -> set[Memory]:
    cpu, pim = agent_writes(trace, offload_plan, line_size)
    if not atomic_kernels:
        pim = [[w] for g in pim for w in g]
    return interleaving_outcomes(cpu, pim)


def as_memory(final: dict[int, int]) -> Memory:
    return frozenset((k, v) for k, v in final.items() if v)


# -- small random traces ------------------------------------------------------

SMALL_BASE = 0x10000


def random_small_trace(rng: random.Random, max_accesses: int = 12, max_lines: int = 4,
                       line_size: int = 64, region_lines: int | None = None) -> Trace:
    """A CPU stream and a one-kernel PIM stream over at most ``max_lines`` lines.

    Lines ``[0, region_lines)`` are inside the PIM region (all lines by default).
    Compute events of random length perturb the relative timing of the agents.
    """
    n_lines = rng.randint(1, max_lines)
    region_lines = n_lines if region_lines is None else region_lines
    total = rng.randint(1, max_accesses)
    n_pim = rng.randint(0, total)
    page = 4096
    bound = SMALL_BASE + page

    def access():
        addr = SMALL_BASE + rng.randrange(n_lines) * line_size + 8 * rng.randrange(line_size // 8)
        return Store(addr, 8) if rng.random() < 0.5 else Load(addr, 8)

    cpu = []
    for _ in range(total - n_pim):
        if rng.random() < 0.4:
            cpu.append(Compute(Site.CPU, rng.randint(1, 150)))
        cpu.append(access())
    pim = [KernelBegin(0, Granularity.FUNCTION)]
    for _ in range(n_pim):
        if rng.random() < 0.4:
            pim.append(Compute(Site.PIM, rng.randint(1, 150)))
        pim.append(access())
    pim.append(KernelEnd(0))
    regions = (Region(SMALL_BASE, SMALL_BASE + region_lines * line_size),) if region_lines else ()
    return Trace(bound, regions, tuple(cpu), tuple(pim), {0: "small"})


# -- PEI ------------------------------------------------------------------------

def _wrap64(x: int) -> int:
    return ((x + 2**63) % 2**64) - 2**63


def sequential_pei(initial: int, ops: Sequence[tuple[PeiOpcode, int]]) -> int:
    v = initial
    for opcode, operand in ops:
        if opcode is PeiOpcode.ADD:
            v = _wrap64(v + operand)
        elif opcode is PeiOpcode.MIN:
            v = v if v < operand else operand
        else:
            v = v if v > operand else operand
    return v


def pei_serial_outcomes(initial: int, ops: Sequence[tuple[PeiOpcode, int]]) -> set[int]:
    """Results of every serial order of ``ops`` (what atomic execution may produce)."""
    return {sequential_pei(initial, perm) for perm in itertools.permutations(ops)}


# -- Bloom filter -----------------------------------------------------------------

def bloom_fpr_estimate(m: int, k: int, n: int) -> float:
    """Standard false-positive estimate (1 - (1 - 1/m)^(k n))^k."""
    return (1.0 - (1.0 - 1.0 / m) ** (k * n)) ** k


def bloom_bits_for(n: int, k: int, target_fpr: float) -> int:
    """Smallest power-of-two filter size whose estimate is below ``target_fpr``."""
    m = 64
    while bloom_fpr_estimate(m, k, n) >= target_fpr:
        m *= 2
    return m


def pack_reference(rows: int, cols: int, block: int) -> list[int]:
    """Packed buffer as source element indices, computed by direct tiling loops."""
    out = []
    n_br = math.ceil(rows / block)
    n_bc = math.ceil(cols / block)
    for bi in range(n_br):
        for bj in range(n_bc):
            for r in range(bi * block, min(rows, (bi + 1) * block)):
                for c in range(bj * block, min(cols, (bj + 1) * block)):
                    out.append(r * cols + c)
    return out
