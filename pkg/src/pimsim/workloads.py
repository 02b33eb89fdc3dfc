"""Seeded synthetic workload generators.

Every generator is a pure function of its parameters and seed. Addresses are
virtual; data that PIM kernels touch is placed inside declared PIM regions.
"""

from __future__ import annotations

import math
import random

from .trace import (
    Compute,
    Fence,
    Granularity,
    KernelBegin,
    KernelEnd,
    Load,
    Region,
    Site,
    Store,
    Trace,
    TraceEvent,
)

PAGE = 4096
LINE = 64
ELEM = 4  # 32-bit matrix elements
QELEM = 1  # 8-bit quantized elements
DATA_BASE = 0x100000

DEFAULT_PACK_BLOCK = 32


def _page_align(n: int) -> int:
    return max(PAGE, -(-n // PAGE) * PAGE)


def _quantize_events(src: int, dst: int, n: int) -> list[TraceEvent]:
    ev: list[TraceEvent] = [Load(src + i * ELEM, ELEM) for i in range(n)]
    if n:
        ev.append(Compute(Site.CPU, n))  # min/max reduction
    for i in range(n):
        ev.append(Load(src + i * ELEM, ELEM))
        ev.append(Store(dst + i * QELEM, QELEM))
    if n:
        ev.append(Compute(Site.CPU, n))  # scale + round to int8
    return ev


def gen_quantize_trace(n_elements: int, seed: int = 0) -> Trace:
    """One quantize kernel: a min/max scan, then a convert scan writing int8 outputs.

    Emits exactly ``2 * n`` 4-byte loads and ``n`` 1-byte stores. ``seed`` is
    accepted for interface uniformity; the access pattern is fixed.
    """
    if n_elements < 0:
        raise ValueError("n_elements must be >= 0")
    n = n_elements
    src = DATA_BASE
    dst = src + _page_align(n * ELEM)
    bound = dst + _page_align(n * QELEM)
    events = [KernelBegin(0, Granularity.FUNCTION), *_quantize_events(src, dst, n), KernelEnd(0)]
    return Trace(bound, (Region(DATA_BASE, bound),), tuple(events), (), {0: "quantize"})


def blocked_order(rows: int, cols: int, block: int) -> list[tuple[int, int]]:
    """(row, col) pairs in packed order: blocks row-major, row-major inside each block."""
    out = []
    for br in range(0, rows, block):
        for bc in range(0, cols, block):
            for r in range(br, min(br + block, rows)):
                for c in range(bc, min(bc + block, cols)):
                    out.append((r, c))
    return out


def _pack_events(src: int, dst: int, rows: int, cols: int, block: int) -> list[TraceEvent]:
    dest = {rc: i for i, rc in enumerate(blocked_order(rows, cols, block))}
    ev: list[TraceEvent] = []
    for c in range(cols):
        for r in range(rows):
            ev.append(Load(src + (r * cols + c) * ELEM, ELEM))
            ev.append(Store(dst + dest[(r, c)] * ELEM, ELEM))
    return ev


def _unpack_events(src_dst: int, rows: int, cols: int, block: int) -> list[TraceEvent]:
    return [Store(src_dst + (r * cols + c) * ELEM, ELEM) for r, c in blocked_order(rows, cols, block)]


def gen_pack_trace(rows: int, cols: int, block: int = DEFAULT_PACK_BLOCK, seed: int = 0) -> Trace:
    """Pack a row-major matrix: read it column by column, write each element to its blocked slot."""
    if min(rows, cols, block) < 1:
        raise ValueError("rows, cols and block must be >= 1")
    size = _page_align(rows * cols * ELEM)
    src = DATA_BASE
    dst = src + size
    bound = dst + size
    events = [KernelBegin(0, Granularity.FUNCTION), *_pack_events(src, dst, rows, cols, block), KernelEnd(0)]
    return Trace(bound, (Region(DATA_BASE, bound),), tuple(events), (), {0: "pack"})


def gemm_shape(matrix_elems: int) -> tuple[int, int]:
    rows = max(1, math.isqrt(max(1, matrix_elems) // 2))
    cols = max(1, matrix_elems // rows)
    return rows, cols


# Kernel id layout of the GEMM pipeline: 4 kernels per GEMM operation.
PIPELINE_STAGES = ("pack", "quantize", "gemm", "unpack")


def gen_gemm_pipeline_trace(
    n_gemm_ops: int,
    matrix_elems: int = 8192,
    seed: int = 0,
    block: int = DEFAULT_PACK_BLOCK,
    gemm_cycles_per_elem: int = 32,
) -> Trace:
    """Repeated pack -> quantize -> GEMM -> unpack, one matrix chunk per GEMM operation.

    Kernel ``4*i + s`` is stage ``s`` of operation ``i`` (see PIPELINE_STAGES).
    A fence precedes each GEMM, so pack/quantize of chunk ``i+1`` may run on PIM
    while the CPU computes chunk ``i``.
    """
    if n_gemm_ops < 1:
        raise ValueError("n_gemm_ops must be >= 1")
    rows, cols = gemm_shape(matrix_elems)
    n = rows * cols
    mat = _page_align(n * ELEM)
    qmat = _page_align(n * QELEM)
    per_op = 4 * mat + qmat
    events: list[TraceEvent] = []
    names: dict[int, str] = {}
    for i in range(n_gemm_ops):
        base = DATA_BASE + i * per_op
        src, packed, qin, qout, result = base, base + mat, base + 2 * mat, base + 3 * mat, base + 3 * mat + qmat
        k = 4 * i
        names.update({k + s: name for s, name in enumerate(PIPELINE_STAGES)})
        events += [KernelBegin(k, Granularity.FUNCTION), *_pack_events(src, packed, rows, cols, block), KernelEnd(k)]
        events += [KernelBegin(k + 1, Granularity.FUNCTION), *_quantize_events(qin, qout, n), KernelEnd(k + 1)]
        events.append(Fence())
        events += [KernelBegin(k + 2, Granularity.FUNCTION), Compute(Site.CPU, n * gemm_cycles_per_elem), KernelEnd(k + 2)]
        events += [KernelBegin(k + 3, Granularity.FUNCTION), *_unpack_events(result, rows, cols, block), KernelEnd(k + 3)]
    bound = DATA_BASE + n_gemm_ops * per_op
    return Trace(bound, (Region(DATA_BASE, bound),), tuple(events), (), names)


def pim_kernel_ids(trace: Trace, names: tuple[str, ...] = ("pack", "quantize")) -> frozenset[int]:
    """Kernel ids whose function name is in ``names``."""
    return frozenset(k for k, nm in trace.kernel_names.items() if nm in names)


def pointer_chase_order(n_nodes: int, seed: int) -> list[int]:
    order = list(range(n_nodes))
    random.Random(seed).shuffle(order)
    return order


def gen_pointer_chase_trace(n_nodes: int, seed: int = 0, node_stride: int = LINE) -> Trace:
    """Traverse a seeded random cyclic linked list once, as a PIM kernel.

    Node ``order[i]`` points to ``order[i+1]`` (wrapping), so the n dependent
    loads visit every node exactly once.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    if node_stride < 8:
        raise ValueError("node_stride must hold an 8-byte pointer")
    order = pointer_chase_order(n_nodes, seed)
    bound = DATA_BASE + _page_align(n_nodes * node_stride)
    loads = [Load(DATA_BASE + node * node_stride, 8) for node in order]
    events = (KernelBegin(0, Granularity.FUNCTION), *loads, KernelEnd(0))
    return Trace(bound, (Region(DATA_BASE, bound),), (), events, {0: "chase"})


def gen_shared_trace(
    n_ops: int,
    sharing_fraction: float,
    seed: int = 0,
    pim_store_fraction: float = 0.25,
    cpu_private_lines: int = 64,
) -> Trace:
    """A CPU thread and a PIM kernel that share a fraction of the kernel's lines.

    The CPU first writes every shared line, then fences, then does private
    work concurrently with the PIM kernel. Each PIM line is shared
    independently with probability ``sharing_fraction``.
    """
    if not 0.0 <= sharing_fraction <= 1.0:
        raise ValueError("sharing_fraction must be in [0, 1]")
    if n_ops < 0:
        raise ValueError("n_ops must be >= 0")
    rng = random.Random(seed)
    pim_lines = max(1, n_ops // 4)
    pim_base = DATA_BASE
    pim_bound = pim_base + _page_align(pim_lines * LINE)
    cpu_base = pim_bound
    cpu_bound = cpu_base + _page_align(cpu_private_lines * LINE)

    shared = [ln for ln in range(pim_lines) if rng.random() < sharing_fraction]
    rng.shuffle(shared)
    line_order = list(range(pim_lines))
    rng.shuffle(line_order)

    cpu: list[TraceEvent] = [Store(pim_base + ln * LINE, 8) for ln in shared]
    cpu.append(Fence())
    for _ in range(n_ops):
        addr = cpu_base + rng.randrange(cpu_private_lines) * LINE + 8 * rng.randrange(LINE // 8)
        cpu.append(Store(addr, 8) if rng.random() < 0.3 else Load(addr, 8))
        cpu.append(Compute(Site.CPU, 4))

    pim: list[TraceEvent] = [Fence(), KernelBegin(0, Granularity.FUNCTION)]
    for i in range(n_ops):
        addr = pim_base + line_order[i % pim_lines] * LINE + 8 * rng.randrange(LINE // 8)
        pim.append(Store(addr, 8) if rng.random() < pim_store_fraction else Load(addr, 8))
    pim.append(KernelEnd(0))
    return Trace(cpu_bound, (Region(pim_base, pim_bound),), tuple(cpu), tuple(pim), {0: "shared_update"})


def shared_lines_of(trace: Trace, line: int = LINE) -> tuple[set[int], set[int]]:
    """(lines written by the CPU, lines touched by PIM) as virtual line numbers."""
    cpu_written = {ev.vaddr // line for ev in trace.cpu if isinstance(ev, Store)}
    pim = {ev.vaddr // line for ev in trace.pim if isinstance(ev, (Load, Store))}
    return cpu_written, pim


GENERATORS = {
    "quantize": gen_quantize_trace,
    "pack": gen_pack_trace,
    "gemm": gen_gemm_pipeline_trace,
    "chase": gen_pointer_chase_trace,
    "shared": gen_shared_trace,
}
