"""Simulated machine: host CPU + cache, vault-partitioned 3D-stacked memory, PIM logic.

All timing is in CPU cycles and all energy in abstract units. Parameters are
loaded from a TOML file (see ``docs/formats.md``); unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class EventKind(str, enum.Enum):
    CPU_COMPUTE = "CpuCompute"
    PIM_COMPUTE = "PimCompute"
    CACHE_ACCESS = "CacheAccess"
    DRAM_ACCESS = "DramAccess"
    CHANNEL_TRANSFER = "ChannelTransfer"
    COHERENCE_MESSAGE = "CoherenceMessage"


DATA_MOVEMENT_KINDS = (
    EventKind.DRAM_ACCESS,
    EventKind.CHANNEL_TRANSFER,
    EventKind.COHERENCE_MESSAGE,
)


class PimCoreKind(str, enum.Enum):
    GENERAL_CORE = "GeneralCore"
    FIXED_ACCELERATOR = "FixedAccelerator"


# Per-event energies. Compute is charged per cycle, CacheAccess per access,
# DramAccess / ChannelTransfer per cache line moved, CoherenceMessage per message.
DEFAULT_ENERGY: dict[EventKind, float] = {
    EventKind.CPU_COMPUTE: 10.0,
    EventKind.PIM_COMPUTE: 3.0,
    EventKind.CACHE_ACCESS: 5.0,
    EventKind.DRAM_ACCESS: 200.0,
    EventKind.CHANNEL_TRANSFER: 300.0,
    EventKind.COHERENCE_MESSAGE: 50.0,
}


@dataclass(frozen=True)
class MachineConfig:
    num_vaults: int = 16
    line_size: int = 64
    cpu_cache_lines: int = 256
    cpu_cache_ways: int = 4
    tlb_entries: int = 64

    lat_cpu_cache_hit: int = 2
    lat_pim_buffer_hit: int = 1
    lat_dram_local_vault: int = 20
    lat_dram_remote_vault: int = 36
    lat_channel_round_trip: int = 60
    lat_pcu_op: int = 1
    lat_fence: int = 1

    energy: Mapping[EventKind, float] = field(default_factory=lambda: dict(DEFAULT_ENERGY))

    vault_area_budget: float = 3.5
    logic_layer_area_budget: float = 55.0
    pim_core_kind: PimCoreKind = PimCoreKind.GENERAL_CORE
    pim_logic_area: float = 0.25

    # PIM core clock relative to the CPU (cycles are CPU cycles).
    pim_cycle_ratio: float = 1.0
    # Compute-cycle multiplier applied when pim_core_kind is FixedAccelerator.
    accel_compute_scale: float = 0.25
    max_conda_rollbacks: int = 8
    # CoNDA read/write signatures: Bloom filters of m bits and k hash functions.
    signature_bits: int = 2048
    signature_hashes: int = 4

    def energy_of(self, kind: EventKind) -> float:
        return float(self.energy.get(kind, 0.0))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "energy":
                value = {k.value: float(v) for k, v in sorted(value.items(), key=lambda kv: kv[0].value)}
            elif isinstance(value, enum.Enum):
                value = value.value
            out[f.name] = value
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Violation:
    category: str
    message: str

    def __str__(self) -> str:
        return f"{self.category}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def validate_config(config: MachineConfig) -> list[Violation]:
    """Return every broken invariant of ``config``; an empty list means ok."""
    v: list[Violation] = []
    if not _is_pow2(config.num_vaults):
        v.append(Violation("topology", f"num_vaults={config.num_vaults} must be a power of two >= 1"))
    if not _is_pow2(config.line_size) or config.line_size < 8:
        v.append(Violation("topology", f"line_size={config.line_size} must be a power of two >= 8"))
    if config.cpu_cache_lines < 1 or config.cpu_cache_ways < 1:
        v.append(Violation("topology", "cpu cache needs at least one line and one way"))
    elif config.cpu_cache_lines % config.cpu_cache_ways:
        v.append(Violation("topology", "cpu_cache_lines must be a multiple of cpu_cache_ways"))
    if config.tlb_entries < 1:
        v.append(Violation("topology", "tlb_entries must be >= 1"))

    for name in (
        "lat_cpu_cache_hit",
        "lat_pim_buffer_hit",
        "lat_dram_local_vault",
        "lat_dram_remote_vault",
        "lat_channel_round_trip",
        "lat_pcu_op",
        "lat_fence",
    ):
        if getattr(config, name) < 1:
            v.append(Violation("latency", f"{name} must be >= 1 cycle"))

    for kind in EventKind:
        if kind not in config.energy:
            v.append(Violation("energy", f"missing energy for {kind.value}"))
        elif config.energy[kind] < 0:
            v.append(Violation("energy", f"energy for {kind.value} is negative"))

    if not 0 < config.vault_area_budget <= config.logic_layer_area_budget:
        v.append(
            Violation(
                "area",
                f"need 0 < vault_area_budget ({config.vault_area_budget}) <= "
                f"logic_layer_area_budget ({config.logic_layer_area_budget})",
            )
        )
    if config.pim_logic_area > config.vault_area_budget:
        v.append(
            Violation(
                "area",
                f"pim_logic_area {config.pim_logic_area} mm2 exceeds vault budget "
                f"{config.vault_area_budget} mm2",
            )
        )
    if config.pim_logic_area < 0:
        v.append(Violation("area", "pim_logic_area must be >= 0"))
    if config.pim_cycle_ratio <= 0 or config.accel_compute_scale <= 0:
        v.append(Violation("latency", "pim_cycle_ratio and accel_compute_scale must be > 0"))
    if config.max_conda_rollbacks < 0:
        v.append(Violation("protocol", "max_conda_rollbacks must be >= 0"))
    if config.signature_bits < 1 or not 1 <= config.signature_hashes <= config.signature_bits:
        v.append(Violation("protocol", "need signature_bits >= 1 and 1 <= signature_hashes <= signature_bits"))
    return v


def check_config(config: MachineConfig) -> MachineConfig:
    violations = validate_config(config)
    if violations:
        raise ConfigError(violations)
    return config


def vault_of(paddr: int, config: MachineConfig) -> int:
    """Cache-line interleaved vault mapping."""
    return (paddr // config.line_size) % config.num_vaults


def config_from_dict(data: Mapping[str, Any]) -> MachineConfig:
    known = {f.name for f in dataclasses.fields(MachineConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError([Violation("schema", f"unknown key {k!r}") for k in unknown])
    kwargs = dict(data)
    if "energy" in kwargs:
        table = dict(DEFAULT_ENERGY)
        by_name = {k.value: k for k in EventKind}
        bad = [k for k in kwargs["energy"] if k not in by_name]
        if bad:
            raise ConfigError([Violation("schema", f"unknown energy kind {k!r}") for k in sorted(bad)])
        for name, val in kwargs["energy"].items():
            table[by_name[name]] = float(val)
        kwargs["energy"] = table
    if "pim_core_kind" in kwargs:
        try:
            kwargs["pim_core_kind"] = PimCoreKind(kwargs["pim_core_kind"])
        except ValueError:
            raise ConfigError([Violation("schema", f"bad pim_core_kind {kwargs['pim_core_kind']!r}")]) from None
    return MachineConfig(**kwargs)


def load_config(path: str | Path) -> MachineConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data)
