"""Virtual-to-physical translation for the CPU and for PIM logic.

Both page-table kinds read the same OS mapping (:class:`PageMap`) so CPU and
PIM agree on physical addresses; they differ only in how many memory accesses
a walk costs. CPU and PIM TLBs are independent and never kept coherent.
"""

from __future__ import annotations

import enum
import random
from collections import OrderedDict
from dataclasses import dataclass, field

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
LEVEL_BITS = 9
LEVELS = 4
FRAME_BITS = 36


class PageTableMode(str, enum.Enum):
    CONVENTIONAL_4LEVEL = "conventional"
    REGION_BASED = "region"


class TranslationFault(Exception):
    def __init__(self, vaddr: int, reason: str = "no PIM region maps this address"):
        self.vaddr = vaddr
        super().__init__(f"translation fault at {vaddr:#x}: {reason}")


class RegionError(ValueError):
    pass


class PageMap:
    """Seeded bijection from virtual page numbers to physical frame numbers.

    An affine map ``vpn -> (a*vpn + b) mod 2**FRAME_BITS`` with odd ``a`` is a
    permutation of the frame space, so distinct pages never share a frame.
    """

    def __init__(self, seed: int = 0):
        rng = random.Random(seed)
        self.seed = seed
        self._mod = 1 << FRAME_BITS
        self._a = rng.randrange(self._mod) | 1
        self._b = rng.randrange(self._mod)

    def frame_of(self, vpn: int) -> int:
        return (self._a * vpn + self._b) % self._mod


class Tlb:
    """Fully associative TLB with FIFO replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("TLB capacity must be >= 1")
        self.capacity = capacity
        self.entries: OrderedDict[int, int] = OrderedDict()

    def lookup(self, vpn: int) -> int | None:
        return self.entries.get(vpn)

    def insert(self, vpn: int, pfn: int) -> None:
        if vpn in self.entries:
            return
        if len(self.entries) >= self.capacity:
            self.entries.popitem(last=False)
        self.entries[vpn] = pfn

    def __len__(self) -> int:
        return len(self.entries)


class ConventionalPageTable:
    """Four-level radix page table (9 index bits per level), populated on first touch."""

    mode = PageTableMode.CONVENTIONAL_4LEVEL

    def __init__(self, page_map: PageMap):
        self.page_map = page_map
        self.root: dict = {}

    def walk(self, vpn: int) -> tuple[int, int]:
        node = self.root
        accesses = 0
        for level in range(LEVELS - 1, 0, -1):
            idx = (vpn >> (level * LEVEL_BITS)) & ((1 << LEVEL_BITS) - 1)
            node = node.setdefault(idx, {})
            accesses += 1
        leaf = vpn & ((1 << LEVEL_BITS) - 1)
        if leaf not in node:
            node[leaf] = self.page_map.frame_of(vpn)
        accesses += 1
        return node[leaf], accesses


@dataclass
class RegionEntry:
    base: int
    bound: int
    flat_map: list[int] = field(repr=False)

    @property
    def first_vpn(self) -> int:
        return self.base >> PAGE_SHIFT


class RegionTable:
    """Flat page table covering only PIM regions: one region lookup + one flat-map read."""

    mode = PageTableMode.REGION_BASED

    def __init__(self, page_map: PageMap):
        self.page_map = page_map
        self.entries: list[RegionEntry] = []

    def register_region(self, base: int, bound: int) -> RegionEntry:
        if base % PAGE_SIZE or bound % PAGE_SIZE:
            raise RegionError(f"region [{base:#x}, {bound:#x}) is not page aligned")
        if not base < bound:
            raise RegionError(f"region [{base:#x}, {bound:#x}) is empty")
        for e in self.entries:
            if base < e.bound and e.base < bound:
                raise RegionError(f"region [{base:#x}, {bound:#x}) overlaps [{e.base:#x}, {e.bound:#x})")
        first = base >> PAGE_SHIFT
        flat = [self.page_map.frame_of(vpn) for vpn in range(first, bound >> PAGE_SHIFT)]
        entry = RegionEntry(base, bound, flat)
        self.entries.append(entry)
        return entry

    def walk(self, vpn: int) -> tuple[int, int]:
        vaddr = vpn << PAGE_SHIFT
        for e in self.entries:
            if e.base <= vaddr < e.bound:
                return e.flat_map[vpn - e.first_vpn], 2
        raise TranslationFault(vaddr)


def register_region(table: RegionTable, base: int, bound: int) -> RegionEntry:
    return table.register_region(base, bound)


@dataclass(frozen=True, slots=True)
class Translation:
    paddr: int
    walk_accesses: int
    tlb_hit: bool


def translate(vaddr: int, walker: ConventionalPageTable | RegionTable, tlb: Tlb) -> Translation:
    vpn = vaddr >> PAGE_SHIFT
    offset = vaddr & (PAGE_SIZE - 1)
    pfn = tlb.lookup(vpn)
    if pfn is not None:
        return Translation((pfn << PAGE_SHIFT) | offset, 0, True)
    try:
        pfn, accesses = walker.walk(vpn)
    except TranslationFault:
        raise TranslationFault(vaddr) from None
    tlb.insert(vpn, pfn)
    return Translation((pfn << PAGE_SHIFT) | offset, accesses, False)


def make_walker(mode: PageTableMode, page_map: PageMap, regions=()) -> ConventionalPageTable | RegionTable:
    if mode is PageTableMode.CONVENTIONAL_4LEVEL:
        return ConventionalPageTable(page_map)
    table = RegionTable(page_map)
    for r in regions:
        table.register_region(r.base & ~(PAGE_SIZE - 1), -(-r.bound // PAGE_SIZE) * PAGE_SIZE)
    return table
