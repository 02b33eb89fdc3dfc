"""CPU <-> PIM coherence mechanisms.

The CPU has a set-associative write-back cache with per-line MESI state. PIM
logic has no cache, so under fine-grained coherence it never holds a line;
every PIM access to a line the CPU caches costs a request/response pair over
the off-chip channel. Memory holds one integer value per cache line.

Mechanisms:

* ``fg``    per-line MESI (:func:`fg_access`)
* ``cg``    coarse-grained region locks (:class:`RegionLocks`, :func:`cg_acquire`)
* ``nc``    PIM regions are non-cacheable for the CPU (:func:`nc_access`)
* ``conda`` optimistic PIM execution tracked in signatures, resolved by the
  CPU at kernel end (:func:`conda_record`, :func:`conda_resolve`)
* ``ideal`` FG state transitions at zero cost (:func:`ideal_access`)
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Iterator

MASK64 = (1 << 64) - 1


class Mechanism(str, enum.Enum):
    CPU_ONLY = "cpu-only"
    FG = "fg"
    CG = "cg"
    NC = "nc"
    CONDA = "conda"
    IDEAL = "ideal"


PIM_MECHANISMS = (Mechanism.FG, Mechanism.CG, Mechanism.NC, Mechanism.CONDA, Mechanism.IDEAL)


class Agent(enum.IntEnum):
    CPU = 0
    PIM = 1


class AccessKind(str, enum.Enum):
    READ = "read"
    WRITE = "write"


class LineState(str, enum.Enum):
    MODIFIED = "M"
    EXCLUSIVE = "E"
    SHARED = "S"
    INVALID = "I"


class Decision(str, enum.Enum):
    PROCEED = "proceed"
    STALL = "stall"
    CONFLICT = "conflict"


class ProtocolError(RuntimeError):
    pass


@dataclass
class CoherenceOutcome:
    messages_on_channel: int = 0
    dram_accesses: int = 0
    # Cache lines carried over the off-chip channel (fills, writebacks, bypasses).
    channel_transfers: int = 0
    flushed_lines: list[int] = field(default_factory=list)
    decision: Decision = Decision.PROCEED
    cache_hit: bool = False
    value: int | None = None


# -- state -------------------------------------------------------------------

class CacheLine:
    __slots__ = ("state", "value")

    def __init__(self, state: LineState, value: int):
        self.state = state
        self.value = value

    def __repr__(self) -> str:
        return f"CacheLine({self.state.value}, {self.value})"


class CpuCache:
    """Set-associative, LRU, write-back, write-allocate. Keys are physical line numbers."""

    def __init__(self, num_lines: int, ways: int):
        self.ways = ways
        self.num_sets = max(1, num_lines // ways)
        self.sets: list[OrderedDict[int, CacheLine]] = [OrderedDict() for _ in range(self.num_sets)]

    def get(self, line: int) -> CacheLine | None:
        return self.sets[line % self.num_sets].get(line)

    def touch(self, line: int) -> None:
        self.sets[line % self.num_sets].move_to_end(line)

    def state(self, line: int) -> LineState:
        entry = self.get(line)
        return entry.state if entry else LineState.INVALID

    def fill(self, line: int, state: LineState, value: int) -> tuple[int, CacheLine] | None:
        s = self.sets[line % self.num_sets]
        victim = None
        if line not in s and len(s) >= self.ways:
            victim = s.popitem(last=False)
        s[line] = CacheLine(state, value)
        return victim

    def remove(self, line: int) -> CacheLine | None:
        return self.sets[line % self.num_sets].pop(line, None)

    def lines(self) -> Iterator[tuple[int, CacheLine]]:
        for s in self.sets:
            yield from s.items()

    def dirty_lines(self) -> set[int]:
        return {ln for ln, e in self.lines() if e.state is LineState.MODIFIED}

    def __contains__(self, line: int) -> bool:
        return self.get(line) is not None

    def __len__(self) -> int:
        return sum(len(s) for s in self.sets)


class Memory:
    def __init__(self):
        self.values: dict[int, int] = {}

    def read(self, line: int) -> int:
        return self.values.get(line, 0)

    def write(self, line: int, value: int) -> None:
        self.values[line] = value


@dataclass
class SystemState:
    cache: CpuCache
    memory: Memory = field(default_factory=Memory)
    # physical line -> PIM region index, for lines inside declared PIM regions
    line_region: dict[int, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, cache_lines: int = 256, ways: int = 4) -> "SystemState":
        return cls(CpuCache(cache_lines, ways))

    def coherent_view(self) -> dict[int, int]:
        """Memory as the CPU would see it after writing back every dirty line."""
        view = dict(self.memory.values)
        for ln, e in self.cache.lines():
            if e.state is LineState.MODIFIED:
                view[ln] = e.value
        return view


def _writeback(state: SystemState, line: int, entry: CacheLine, out: CoherenceOutcome) -> None:
    state.memory.write(line, entry.value)
    out.dram_accesses += 1
    out.channel_transfers += 1


def cpu_cached_access(state: SystemState, line: int, kind: AccessKind, value: int | None = None) -> CoherenceOutcome:
    """A CPU load/store through the cache (MESI against memory; PIM caches nothing)."""
    out = CoherenceOutcome()
    cache = state.cache
    entry = cache.get(line)
    if entry is not None:
        cache.touch(line)
        out.cache_hit = True
        if kind is AccessKind.READ:
            out.value = entry.value
        else:
            entry.value = value
            entry.state = LineState.MODIFIED
        return out
    out.dram_accesses += 1
    out.channel_transfers += 1
    mem_value = state.memory.read(line)
    if kind is AccessKind.READ:
        victim = cache.fill(line, LineState.EXCLUSIVE, mem_value)
        out.value = mem_value
    else:
        victim = cache.fill(line, LineState.MODIFIED, value)
    if victim is not None and victim[1].state is LineState.MODIFIED:
        _writeback(state, victim[0], victim[1], out)
    return out


def flush_line(state: SystemState, line: int, out: CoherenceOutcome, invalidate: bool = True) -> None:
    entry = state.cache.get(line)
    if entry is None:
        return
    if entry.state is LineState.MODIFIED:
        _writeback(state, line, entry, out)
        out.flushed_lines.append(line)
        entry.state = LineState.EXCLUSIVE
    if invalidate:
        state.cache.remove(line)


# -- FG ----------------------------------------------------------------------

def fg_access(agent: Agent, line: int, kind: AccessKind, state: SystemState, value: int | None = None) -> CoherenceOutcome:
    if agent is Agent.CPU:
        return cpu_cached_access(state, line, kind, value)
    out = CoherenceOutcome()
    entry = state.cache.get(line)
    if entry is not None:
        out.messages_on_channel += 2  # snoop request + response
        if entry.state is LineState.MODIFIED:
            _writeback(state, line, entry, out)
            out.flushed_lines.append(line)
        if kind is AccessKind.READ:
            entry.state = LineState.SHARED
        else:
            state.cache.remove(line)
    out.dram_accesses += 1
    if kind is AccessKind.READ:
        out.value = state.memory.read(line)
    else:
        state.memory.write(line, value)
    return out


def ideal_access(agent: Agent, line: int, kind: AccessKind, state: SystemState, value: int | None = None) -> CoherenceOutcome:
    """FG transitions with coherence traffic free: only the requester's own access is charged."""
    out = fg_access(agent, line, kind, state, value)
    if agent is Agent.PIM:
        out.messages_on_channel = 0
        out.channel_transfers = 0
        out.dram_accesses = 1
    return out


def mesi_ok(state: SystemState) -> bool:
    """Single-writer invariant. PIM never caches, so the CPU copy is the only copy:
    it must be valid, and a clean copy must equal memory."""
    for ln, e in state.cache.lines():
        if e.state is LineState.INVALID:
            return False
        if e.state is not LineState.MODIFIED and e.value != state.memory.read(ln):
            return False
    return True


# -- NC ----------------------------------------------------------------------

def nc_access(agent: Agent, line: int, kind: AccessKind, state: SystemState, value: int | None = None) -> CoherenceOutcome:
    """Access to a non-cacheable PIM-region line: the CPU bypasses its cache."""
    out = CoherenceOutcome(dram_accesses=1)
    if agent is Agent.CPU:
        out.channel_transfers = 1
    if kind is AccessKind.READ:
        out.value = state.memory.read(line)
    else:
        state.memory.write(line, value)
    return out


# -- CG ----------------------------------------------------------------------

class RegionLocks:
    def __init__(self):
        self.holder: dict[int, Agent] = {}

    def held_by(self, region: int) -> Agent | None:
        return self.holder.get(region)


def cg_acquire(agent: Agent, region: int, state: SystemState, locks: RegionLocks) -> CoherenceOutcome:
    """Take the lock on ``region``. A PIM acquire flushes the CPU's dirty lines in it."""
    current = locks.held_by(region)
    if current is not None and current is not agent:
        return CoherenceOutcome(decision=Decision.STALL)
    out = CoherenceOutcome(messages_on_channel=1)
    locks.holder[region] = agent
    if agent is Agent.PIM:
        victims = sorted(ln for ln, _ in state.cache.lines() if state.line_region.get(ln) == region)
        for ln in victims:
            flush_line(state, ln, out, invalidate=True)
    return out


def cg_release(agent: Agent, region: int, state: SystemState, locks: RegionLocks) -> CoherenceOutcome:
    if locks.held_by(region) is not agent:
        raise ProtocolError(f"{agent.name} releases region {region} it does not hold")
    del locks.holder[region]
    return CoherenceOutcome(messages_on_channel=1)


def cg_cpu_access(line: int, kind: AccessKind, state: SystemState, locks: RegionLocks,
                  value: int | None = None) -> CoherenceOutcome:
    """CPU access under CG: writes to a PIM-held region stall; reads are served uncached."""
    region = state.line_region.get(line)
    if region is not None and locks.held_by(region) is Agent.PIM:
        if kind is AccessKind.WRITE:
            return CoherenceOutcome(decision=Decision.STALL)
        return CoherenceOutcome(dram_accesses=1, channel_transfers=1, value=state.memory.read(line))
    return cpu_cached_access(state, line, kind, value)


def cg_pim_access(line: int, kind: AccessKind, state: SystemState, value: int | None = None) -> CoherenceOutcome:
    out = CoherenceOutcome(dram_accesses=1)
    if kind is AccessKind.READ:
        out.value = state.memory.read(line)
    else:
        state.memory.write(line, value)
    return out


# -- CoNDA -------------------------------------------------------------------

def mix64(x: int) -> int:
    """splitmix64 finalizer."""
    x &= MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK64
    x ^= x >> 31
    return x


class Signature:
    """Bloom filter over line addresses with k independently seeded 64-bit mixes.

    Double hashing (h1 + i*h2) is cheaper but its correlated positions push the
    false-positive rate well above the Bloom estimate at low fill.
    """

    SEED_STEP = 0x9E3779B97F4A7C15

    def __init__(self, m: int = 2048, k: int = 4):
        if m < 1 or k < 1:
            raise ValueError("signature needs m >= 1 bits and k >= 1 hashes")
        self.m = m
        self.k = k
        self.bits = 0
        self.inserted = 0
        self._seeds = [mix64((i + 1) * self.SEED_STEP) for i in range(k)]

    def positions(self, line: int) -> list[int]:
        m = self.m
        return [mix64(line ^ s) % m for s in self._seeds]

    def insert(self, line: int) -> None:
        for p in self.positions(line):
            self.bits |= 1 << p
        self.inserted += 1

    def maybe_contains(self, line: int) -> bool:
        bits = self.bits
        return all(bits >> p & 1 for p in self.positions(line))

    def clear(self) -> None:
        self.bits = 0
        self.inserted = 0

    def popcount(self) -> int:
        return bin(self.bits).count("1")


class EpochStatus(str, enum.Enum):
    OPTIMISTIC = "optimistic"
    RESOLVING = "resolving"
    COMMITTED = "committed"
    ROLLED_BACK = "rolled_back"


@dataclass
class CondaEpoch:
    read_sig: Signature
    write_sig: Signature
    write_buffer: dict[int, int] = field(default_factory=dict)
    status: EpochStatus = EpochStatus.OPTIMISTIC
    rollbacks: int = 0

    @classmethod
    def new(cls, m: int = 2048, k: int = 4) -> "CondaEpoch":
        return cls(Signature(m, k), Signature(m, k))

    def read_value(self, line: int, memory: Memory) -> int:
        if line in self.write_buffer:
            return self.write_buffer[line]
        return memory.read(line)


def conda_record(epoch: CondaEpoch, line: int, kind: AccessKind, value: int | None = None) -> CondaEpoch:
    """Log one optimistic PIM access. Generates no channel traffic."""
    if epoch.status is not EpochStatus.OPTIMISTIC:
        raise ProtocolError(f"record on {epoch.status.value} epoch")
    if kind is AccessKind.READ:
        epoch.read_sig.insert(line)
    else:
        epoch.write_sig.insert(line)
        epoch.write_buffer[line] = value
    return epoch


@dataclass
class Resolution:
    decision: Decision
    flushed: list[int]
    messages_on_channel: int = 3
    dram_accesses: int = 0
    channel_transfers: int = 0

    @property
    def committed(self) -> bool:
        return self.decision is Decision.PROCEED


def conda_conflicts(epoch: CondaEpoch, cpu_dirty_lines: Iterable[int], cpu_read_lines: Iterable[int]) -> tuple[bool, list[int]]:
    """Return (conflict?, dirty CPU lines that caused it)."""
    rs, ws = epoch.read_sig, epoch.write_sig
    culprits = sorted(ln for ln in cpu_dirty_lines if rs.maybe_contains(ln) or ws.maybe_contains(ln))
    if culprits:
        return True, culprits
    return any(ws.maybe_contains(ln) for ln in cpu_read_lines), []


def conda_resolve(epoch: CondaEpoch, cpu_dirty_lines: Iterable[int], cpu_read_lines: Iterable[int],
                  state: SystemState | None = None) -> Resolution:
    """CPU-side resolution at kernel end.

    Two signatures cross the channel and one reply returns. On a conflict the
    offending dirty CPU lines are flushed and the epoch is marked rolled back;
    otherwise the write buffer drains to memory and stale CPU copies of
    written lines are invalidated.
    """
    if epoch.status is not EpochStatus.OPTIMISTIC:
        raise ProtocolError(f"resolve on {epoch.status.value} epoch")
    epoch.status = EpochStatus.RESOLVING
    conflict, culprits = conda_conflicts(epoch, cpu_dirty_lines, cpu_read_lines)
    res = Resolution(Decision.CONFLICT if conflict else Decision.PROCEED, culprits)
    if conflict:
        if state is not None:
            out = CoherenceOutcome()
            for ln in culprits:
                flush_line(state, ln, out, invalidate=True)
            res.dram_accesses, res.channel_transfers = out.dram_accesses, out.channel_transfers
        epoch.status = EpochStatus.ROLLED_BACK
        return res
    if state is not None:
        ws = epoch.write_sig
        stale = [ln for ln, _ in state.cache.lines() if ws.maybe_contains(ln)]
        out = CoherenceOutcome()
        for ln in stale:
            # A dirty line here was written before the epoch began; it is older than PIM's write.
            flush_line(state, ln, out, invalidate=True)
        for ln in sorted(epoch.write_buffer):
            state.memory.write(ln, epoch.write_buffer[ln])
        res.dram_accesses = out.dram_accesses + len(epoch.write_buffer)
        res.channel_transfers = out.channel_transfers
    epoch.status = EpochStatus.COMMITTED
    return res


@dataclass(frozen=True)
class ReplayDirective:
    restart_at: int
    rollbacks: int


def conda_rollback_and_reexecute(epoch: CondaEpoch, kernel_start: int = 0) -> ReplayDirective:
    """Reset PIM-side speculative state so the kernel re-runs from its first event."""
    if epoch.status is not EpochStatus.ROLLED_BACK:
        raise ProtocolError(f"rollback on {epoch.status.value} epoch")
    epoch.write_buffer.clear()
    epoch.read_sig.clear()
    epoch.write_sig.clear()
    epoch.rollbacks += 1
    epoch.status = EpochStatus.OPTIMISTIC
    return ReplayDirective(kernel_start, epoch.rollbacks)
