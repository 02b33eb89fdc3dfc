"""Offload-target identification from per-function profiles.

A function is a *candidate* when it passes C1-C4 and a *target* when it also
passes the discard rules D1-D3:

    C1  highest energy_total of all profiles (ties all pass)
    C2  energy_data_movement / workload_energy_total > dm_fraction_of_workload
    C3  mpki > mpki
    C4  energy_data_movement / energy_total > dm_share
    D1  pim_runtime_ratio <= max_runtime_ratio
    D2  est_area_mm2 <= area budget
    D3  shared_lines <= sharing_fraction * touched_lines
        (only under conventional coherence; always passes otherwise)
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, TextIO

from .coherence import Mechanism
from .engine import Simulator
from .machine import MachineConfig
from .trace import KernelBegin, Trace

RULES = ("C1", "C2", "C3", "C4", "D1", "D2", "D3")

PROFILE_COLUMNS = (
    "name",
    "energy_total",
    "energy_data_movement",
    "mpki",
    "pim_runtime_ratio",
    "est_area_mm2",
    "shared_lines",
    "workload_energy_total",
)
OPTIONAL_COLUMNS = ("touched_lines",)

CONVENTIONAL = frozenset({Mechanism.FG.value, Mechanism.CG.value, Mechanism.NC.value})


class AnalyzerError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    dm_fraction_of_workload: float = 0.20
    mpki: float = 10.0
    dm_share: float = 0.5
    max_runtime_ratio: float = 1.0
    sharing_fraction: float = 0.01

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "Thresholds":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise AnalyzerError(f"unknown threshold(s): {', '.join(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class FunctionProfile:
    name: str
    energy_total: float
    energy_data_movement: float
    mpki: float
    pim_runtime_ratio: float
    est_area_mm2: float
    shared_lines: int
    workload_energy_total: float
    touched_lines: int = 0

    def check(self) -> "FunctionProfile":
        if self.workload_energy_total == 0:
            raise AnalyzerError(f"{self.name}: workload_energy_total is 0, energy fractions are undefined")
        if not 0 <= self.energy_data_movement <= self.energy_total <= self.workload_energy_total:
            raise AnalyzerError(
                f"{self.name}: need 0 <= energy_data_movement <= energy_total <= workload_energy_total"
            )
        if self.mpki < 0:
            raise AnalyzerError(f"{self.name}: mpki must be >= 0")
        if not self.pim_runtime_ratio > 0:
            raise AnalyzerError(f"{self.name}: pim_runtime_ratio must be > 0")
        if self.shared_lines < 0 or self.touched_lines < 0 or self.est_area_mm2 < 0:
            raise AnalyzerError(f"{self.name}: counts and area must be >= 0")
        return self


@dataclass(frozen=True)
class RuleOutcome:
    rule: str
    passed: bool
    value: float
    threshold: float
    applied: bool = True


@dataclass
class Verdict:
    name: str
    candidate: bool
    target: bool
    reasons: list[RuleOutcome] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "candidate": self.candidate,
            "target": self.target,
            "reasons": [asdict(r) for r in self.reasons],
        }


def identify_candidates(profiles: Iterable[FunctionProfile], thresholds: Thresholds = Thresholds()) -> list[Verdict]:
    profiles = [p.check() for p in profiles]
    if not profiles:
        raise AnalyzerError("no profiles given")
    top = max(p.energy_total for p in profiles)
    out = []
    for p in profiles:
        wl = p.energy_data_movement / p.workload_energy_total
        share = p.energy_data_movement / p.energy_total if p.energy_total else 0.0
        reasons = [
            RuleOutcome("C1", p.energy_total == top, p.energy_total, top),
            RuleOutcome("C2", wl > thresholds.dm_fraction_of_workload, wl, thresholds.dm_fraction_of_workload),
            RuleOutcome("C3", p.mpki > thresholds.mpki, p.mpki, thresholds.mpki),
            RuleOutcome("C4", share > thresholds.dm_share, share, thresholds.dm_share),
        ]
        out.append(Verdict(p.name, all(r.passed for r in reasons), False, reasons))
    return out


def filter_targets(
    candidates: list[Verdict],
    profiles: Iterable[FunctionProfile],
    area_budget_mm2: float,
    coherence: str = Mechanism.FG.value,
    thresholds: Thresholds = Thresholds(),
) -> list[Verdict]:
    """Add D1-D3 to each verdict. ``coherence`` names the mechanism under study."""
    by_name = {p.name: p for p in profiles}
    conventional = coherence in CONVENTIONAL
    out = []
    for v in candidates:
        p = by_name[v.name]
        limit = thresholds.sharing_fraction * p.touched_lines
        d = [
            RuleOutcome("D1", p.pim_runtime_ratio <= thresholds.max_runtime_ratio, p.pim_runtime_ratio,
                        thresholds.max_runtime_ratio),
            RuleOutcome("D2", p.est_area_mm2 <= area_budget_mm2, p.est_area_mm2, area_budget_mm2),
            RuleOutcome("D3", p.shared_lines <= limit or not conventional, p.shared_lines, limit, conventional),
        ]
        reasons = [r for r in v.reasons if r.rule.startswith("C")] + d
        out.append(Verdict(v.name, v.candidate, v.candidate and all(r.passed for r in d), reasons))
    return out


def analyze(
    profiles: list[FunctionProfile],
    area_budget_mm2: float,
    coherence: str = Mechanism.FG.value,
    thresholds: Thresholds = Thresholds(),
) -> list[Verdict]:
    return filter_targets(identify_candidates(profiles, thresholds), profiles, area_budget_mm2, coherence, thresholds)


def verdicts_to_json(verdicts: list[Verdict], thresholds: Thresholds, area_budget_mm2: float, coherence: str) -> str:
    doc = {
        "schema": 1,
        "coherence": coherence,
        "area_budget_mm2": area_budget_mm2,
        "thresholds": asdict(thresholds),
        "targets": [v.name for v in verdicts if v.target],
        "verdicts": [v.to_dict() for v in verdicts],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- CSV ----------------------------------------------------------------------

def read_profiles(source: str | Path | TextIO) -> list[FunctionProfile]:
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_profiles(fh)
    reader = csv.DictReader(source)
    header = reader.fieldnames or []
    missing = [c for c in PROFILE_COLUMNS if c not in header]
    extra = [c for c in header if c not in PROFILE_COLUMNS and c not in OPTIONAL_COLUMNS]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing column(s): {', '.join(missing)}")
        if extra:
            parts.append(f"unknown column(s): {', '.join(extra)}")
        raise AnalyzerError("; ".join(parts))
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(
                FunctionProfile(
                    name=row["name"],
                    energy_total=float(row["energy_total"]),
                    energy_data_movement=float(row["energy_data_movement"]),
                    mpki=float(row["mpki"]),
                    pim_runtime_ratio=float(row["pim_runtime_ratio"]),
                    est_area_mm2=float(row["est_area_mm2"]),
                    shared_lines=int(row["shared_lines"]),
                    workload_energy_total=float(row["workload_energy_total"]),
                    touched_lines=int(row.get("touched_lines") or 0),
                )
            )
        except (TypeError, ValueError) as exc:
            raise AnalyzerError(f"line {lineno}: {exc}") from None
    if not out:
        raise AnalyzerError("profile file has no rows")
    return out


def write_profiles(profiles: Iterable[FunctionProfile], dest: TextIO | None = None) -> str:
    buf = dest or io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_COLUMNS + OPTIONAL_COLUMNS)
    for p in profiles:
        w.writerow([getattr(p, c) for c in PROFILE_COLUMNS + OPTIONAL_COLUMNS])
    return buf.getvalue() if dest is None else ""


# -- profiles from the simulator ------------------------------------------------

def profile_from_simulation(
    config: MachineConfig,
    trace: Trace,
    functions: Mapping[str, Iterable[int]] | None = None,
    mechanism: Mechanism | str = Mechanism.FG,
) -> list[FunctionProfile]:
    """One profile per function, measured with a CPU-only run plus one offloaded run per function.

    ``functions`` maps function names to kernel ids; by default kernels are
    grouped by their trace names.
    """
    ids = trace.kernel_ids()
    unlabeled = sorted(k for k in ids if k not in trace.kernel_names)
    if unlabeled and functions is None:
        raise AnalyzerError(f"unlabeled kernels: {unlabeled}")
    if functions is None:
        groups: dict[str, list[int]] = {}
        for k in sorted(ids):
            groups.setdefault(trace.kernel_names[k], []).append(k)
    else:
        groups = {name: sorted(ks) for name, ks in functions.items()}
        covered = {k for ks in groups.values() for k in ks}
        missing = sorted(set(ids) - covered)
        if missing:
            raise AnalyzerError(f"unlabeled kernels: {missing}")

    base = Simulator(config, trace, Mechanism.CPU_ONLY).run()
    workload = base.ledger.total
    offloadable = {ev.kernel_id for ev in trace.cpu if isinstance(ev, KernelBegin)}
    profiles = []
    for name, kids in sorted(groups.items()):
        stats = [base.kernels[k] for k in kids if k in base.kernels]
        energy = sum(s.ledger.total for s in stats)
        dm = sum(s.ledger.data_movement_total for s in stats)
        misses = sum(s.dram_misses for s in stats)
        instr = sum(s.instructions for s in stats)
        cpu_time = sum(s.cycles for s in stats)
        plan = [k for k in kids if k in offloadable]
        pim_rep = Simulator(config, trace, mechanism, plan).run()
        pim_stats = [pim_rep.kernels[k] for k in kids if k in pim_rep.kernels]
        pim_time = sum(s.cycles for s in pim_stats)
        profiles.append(
            FunctionProfile(
                name=name,
                energy_total=energy,
                energy_data_movement=dm,
                mpki=misses * 1000.0 / instr if instr else 0.0,
                pim_runtime_ratio=max(pim_time, 1) / max(cpu_time, 1),
                est_area_mm2=config.pim_logic_area,
                shared_lines=sum(s.shared_lines for s in pim_stats),
                workload_energy_total=workload,
                touched_lines=sum(len(s.touched_lines) for s in pim_stats),
            )
        )
    return profiles
