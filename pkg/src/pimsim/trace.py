"""Workload traces: event types, validation, and the line-oriented text format.

A trace has a header (address-space size, PIM regions, optional kernel names)
and two event streams, one for the CPU and one for PIM logic. The text format
is documented in ``docs/formats.md``; :func:`write_trace` and
:func:`parse_trace` round-trip exactly.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union


class Site(str, enum.Enum):
    CPU = "cpu"
    PIM = "pim"


class Granularity(str, enum.Enum):
    INSTRUCTION = "instruction"
    BULK_OP = "bulkop"
    FUNCTION = "function"
    APPLICATION = "application"


class PeiOpcode(str, enum.Enum):
    ADD = "add"
    MIN = "min"
    MAX = "max"


@dataclass(frozen=True, slots=True)
class Compute:
    site: Site
    cycles: int


@dataclass(frozen=True, slots=True)
class Load:
    vaddr: int
    bytes: int


@dataclass(frozen=True, slots=True)
class Store:
    vaddr: int
    bytes: int


@dataclass(frozen=True, slots=True)
class KernelBegin:
    kernel_id: int
    granularity: Granularity = Granularity.FUNCTION


@dataclass(frozen=True, slots=True)
class KernelEnd:
    kernel_id: int


@dataclass(frozen=True, slots=True)
class Pei:
    opcode: PeiOpcode
    vaddr: int
    operand: int


@dataclass(frozen=True, slots=True)
class Fence:
    pass


TraceEvent = Union[Compute, Load, Store, KernelBegin, KernelEnd, Pei, Fence]


@dataclass(frozen=True, slots=True)
class Region:
    base: int
    bound: int

    def __contains__(self, vaddr: int) -> bool:
        return self.base <= vaddr < self.bound


class TraceError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Trace:
    space: int
    regions: tuple[Region, ...] = ()
    cpu: tuple[TraceEvent, ...] = ()
    pim: tuple[TraceEvent, ...] = ()
    kernel_names: dict[int, str] = field(default_factory=dict)

    def region_of(self, vaddr: int) -> int | None:
        for i, r in enumerate(self.regions):
            if r.base <= vaddr < r.bound:
                return i
        return None

    def events(self) -> Iterable[tuple[Site, TraceEvent]]:
        for ev in self.cpu:
            yield Site.CPU, ev
        for ev in self.pim:
            yield Site.PIM, ev

    def count(self, kind: type, stream: str | None = None) -> int:
        streams = (self.cpu, self.pim) if stream is None else (getattr(self, stream),)
        return sum(1 for s in streams for ev in s if type(ev) is kind)

    def kernel_ids(self) -> list[int]:
        return [ev.kernel_id for _, ev in self.events() if isinstance(ev, KernelBegin)]

    def validate(self) -> "Trace":
        validate_trace(self)
        return self


def _check_stream(events: Iterable[TraceEvent], stream: str, space: int, seen: set[int],
                  lines: list[int] | None = None) -> None:
    stack: list[int] = []
    for i, ev in enumerate(events):
        lineno = lines[i] if lines else None
        if isinstance(ev, KernelBegin):
            if ev.kernel_id in seen:
                raise TraceError(f"duplicate kernel id {ev.kernel_id}", lineno)
            seen.add(ev.kernel_id)
            stack.append(ev.kernel_id)
        elif isinstance(ev, KernelEnd):
            if not stack or stack[-1] != ev.kernel_id:
                raise TraceError(f"unbalanced kernel markers: KE {ev.kernel_id} without matching KB", lineno)
            stack.pop()
        elif isinstance(ev, (Load, Store)):
            if ev.bytes < 1:
                raise TraceError(f"access size must be >= 1, got {ev.bytes}", lineno)
            if ev.vaddr < 0 or ev.vaddr + ev.bytes > space:
                raise TraceError(f"vaddr {ev.vaddr:#x} outside declared space {space:#x}", lineno)
        elif isinstance(ev, Pei):
            if stream == "pim":
                raise TraceError("PEIs are issued by the CPU only", lineno)
            if ev.vaddr < 0 or ev.vaddr + 8 > space:
                raise TraceError(f"vaddr {ev.vaddr:#x} outside declared space {space:#x}", lineno)
        elif isinstance(ev, Compute):
            if ev.cycles < 0:
                raise TraceError("compute cycles must be >= 0", lineno)
        if stream == "pim" and not stack and not isinstance(ev, (Fence, KernelBegin, KernelEnd)):
            raise TraceError("pim stream events must lie inside a kernel", lineno)
    if stack:
        raise TraceError(f"unbalanced kernel markers: kernel {stack[-1]} never ends")


def validate_trace(trace: Trace) -> None:
    if trace.space < 0:
        raise TraceError("negative address space")
    regs = sorted(trace.regions, key=lambda r: r.base)
    for r in regs:
        if not r.base < r.bound:
            raise TraceError(f"region [{r.base:#x}, {r.bound:#x}) needs base < bound")
        if r.bound > trace.space:
            raise TraceError(f"region [{r.base:#x}, {r.bound:#x}) outside declared space")
    for a, b in zip(regs, regs[1:]):
        if b.base < a.bound:
            raise TraceError(f"regions [{a.base:#x}, {a.bound:#x}) and [{b.base:#x}, {b.bound:#x}) overlap")
    seen: set[int] = set()
    _check_stream(trace.cpu, "cpu", trace.space, seen)
    _check_stream(trace.pim, "pim", trace.space, seen)


# -- text format -------------------------------------------------------------

def _format_event(ev: TraceEvent) -> str:
    if isinstance(ev, Load):
        return f"LD {ev.vaddr:#x} {ev.bytes}"
    if isinstance(ev, Store):
        return f"ST {ev.vaddr:#x} {ev.bytes}"
    if isinstance(ev, Compute):
        return f"CMP {ev.site.value} {ev.cycles}"
    if isinstance(ev, KernelBegin):
        return f"KB {ev.kernel_id} {ev.granularity.value}"
    if isinstance(ev, KernelEnd):
        return f"KE {ev.kernel_id}"
    if isinstance(ev, Pei):
        return f"PEI {ev.opcode.value} {ev.vaddr:#x} {ev.operand}"
    if isinstance(ev, Fence):
        return "FENCE"
    raise TypeError(f"not a trace event: {ev!r}")


def write_trace(trace: Trace, out: str | Path | io.TextIOBase) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="ascii", newline="\n") as fh:
            write_trace(trace, fh)
        return
    out.write(f"space {trace.space:#x}\n")
    for r in trace.regions:
        out.write(f"region {r.base:#x} {r.bound:#x}\n")
    for kid in sorted(trace.kernel_names):
        out.write(f"kernel {kid} {trace.kernel_names[kid]}\n")
    for site, ev in trace.events():
        out.write(f"{site.value} {_format_event(ev)}\n")


def trace_to_text(trace: Trace) -> str:
    buf = io.StringIO()
    write_trace(trace, buf)
    return buf.getvalue()


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise TraceError(f"bad integer {tok!r}", lineno) from None


def _parse_event(op: str, args: list[str], lineno: int) -> TraceEvent:
    def need(n: int) -> None:
        if len(args) != n:
            raise TraceError(f"{op} takes {n} operand(s), got {len(args)}", lineno)

    try:
        if op == "LD":
            need(2)
            return Load(_int(args[0], lineno), _int(args[1], lineno))
        if op == "ST":
            need(2)
            return Store(_int(args[0], lineno), _int(args[1], lineno))
        if op == "CMP":
            need(2)
            return Compute(Site(args[0]), _int(args[1], lineno))
        if op == "KB":
            need(2)
            return KernelBegin(_int(args[0], lineno), Granularity(args[1]))
        if op == "KE":
            need(1)
            return KernelEnd(_int(args[0], lineno))
        if op == "PEI":
            need(3)
            return Pei(PeiOpcode(args[0]), _int(args[1], lineno), _int(args[2], lineno))
        if op == "FENCE":
            need(0)
            return Fence()
    except ValueError as exc:
        if isinstance(exc, TraceError):
            raise
        raise TraceError(str(exc), lineno) from None
    raise TraceError(f"unknown event {op!r}", lineno)


def parse_text(text: str) -> Trace:
    space: int | None = None
    regions: list[Region] = []
    names: dict[int, str] = {}
    streams: dict[str, list[TraceEvent]] = {"cpu": [], "pim": []}
    linenos: dict[str, list[int]] = {"cpu": [], "pim": []}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        head = toks[0]
        if head == "space":
            if len(toks) != 2 or space is not None:
                raise TraceError("malformed or repeated 'space' header", lineno)
            space = _int(toks[1], lineno)
        elif head == "region":
            if len(toks) != 3:
                raise TraceError("'region' takes base and bound", lineno)
            regions.append(Region(_int(toks[1], lineno), _int(toks[2], lineno)))
        elif head == "kernel":
            if len(toks) != 3:
                raise TraceError("'kernel' takes an id and a name", lineno)
            names[_int(toks[1], lineno)] = toks[2]
        elif head in streams:
            if space is None:
                raise TraceError("events before 'space' header", lineno)
            if len(toks) < 2:
                raise TraceError("missing event opcode", lineno)
            streams[head].append(_parse_event(toks[1], toks[2:], lineno))
            linenos[head].append(lineno)
        else:
            raise TraceError(f"unknown record {head!r}", lineno)

    if space is None:
        raise TraceError("missing 'space' header")
    trace = Trace(space, tuple(regions), tuple(streams["cpu"]), tuple(streams["pim"]), names)
    # Re-run the stream checks with line numbers for precise diagnostics.
    seen: set[int] = set()
    _check_stream(trace.cpu, "cpu", space, seen, linenos["cpu"])
    _check_stream(trace.pim, "pim", space, seen, linenos["pim"])
    validate_trace(trace)
    return trace


def parse_trace(path: str | Path) -> Trace:
    with open(path, encoding="ascii") as fh:
        return parse_text(fh.read())
