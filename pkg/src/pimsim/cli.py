"""Command-line experiment runner.

Exit status: 0 ok, 2 bad config / trace / schema / arguments, 3 simulation
error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

from . import workloads
from .analyzer import AnalyzerError, Thresholds, analyze, profile_from_simulation, read_profiles, verdicts_to_json
from .coherence import Mechanism
from .engine import MetricsReport, SimulationError, Simulator
from .machine import ConfigError, MachineConfig, load_config, tomllib
from .trace import Trace, TraceError, parse_trace, trace_to_text
from .xlat import PageTableMode

EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_IO = 0, 2, 3, 4

COMPARE_MECHANISMS = (Mechanism.FG, Mechanism.CG, Mechanism.NC, Mechanism.CONDA, Mechanism.IDEAL)

# generator name -> {short parameter name: (keyword argument, type)}
GEN_PARAMS: dict[str, dict[str, tuple[str, Callable]]] = {
    "quantize": {"n": ("n_elements", int)},
    "pack": {"rows": ("rows", int), "cols": ("cols", int), "block": ("block", int)},
    "gemm": {
        "nops": ("n_gemm_ops", int),
        "elems": ("matrix_elems", int),
        "block": ("block", int),
        "cycles": ("gemm_cycles_per_elem", int),
    },
    "chase": {"n": ("n_nodes", int), "stride": ("node_stride", int)},
    "shared": {
        "n": ("n_ops", int),
        "share": ("sharing_fraction", float),
        "pim_store": ("pim_store_fraction", float),
        "private": ("cpu_private_lines", int),
    },
}


class UsageError(ValueError):
    pass


def parse_gen_spec(spec: str) -> tuple[str, dict[str, Any]]:
    """``name:key=value,key=value`` -> (generator name, keyword arguments)."""
    name, _, rest = spec.partition(":")
    if name not in GEN_PARAMS:
        raise UsageError(f"unknown generator {name!r}; choose from {', '.join(sorted(GEN_PARAMS))}")
    kwargs: dict[str, Any] = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq or key not in GEN_PARAMS[name]:
            raise UsageError(f"bad parameter {item!r} for {name}; known: {', '.join(GEN_PARAMS[name])}")
        kw, typ = GEN_PARAMS[name][key]
        try:
            kwargs[kw] = typ(value)
        except ValueError:
            raise UsageError(f"{name}: {key}={value!r} is not a valid {typ.__name__}") from None
    return name, kwargs


def generate(spec: str, seed: int) -> Trace:
    name, kwargs = parse_gen_spec(spec)
    try:
        return workloads.GENERATORS[name](seed=seed, **kwargs)
    except TypeError as exc:
        raise UsageError(f"{name}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"{name}: {exc}") from None


def _config(args) -> MachineConfig:
    return load_config(args.config) if args.config else MachineConfig()


def _trace(args) -> Trace:
    if bool(args.gen) == bool(args.trace):
        raise UsageError("give exactly one of --gen or --trace")
    return generate(args.gen, args.seed) if args.gen else parse_trace(args.trace)


def _source(args) -> str:
    return f"gen:{args.gen}" if args.gen else f"file:{Path(args.trace).name}"


def resolve_offload(trace: Trace, spec: str | None) -> frozenset[int]:
    """Comma list of kernel ids or names; ``all`` means every CPU-stream kernel."""
    if not spec:
        return frozenset()
    cpu_ids = [k for k in trace.kernel_ids() if k in {getattr(e, "kernel_id", None) for e in trace.cpu}]
    if spec == "all":
        return frozenset(cpu_ids)
    out = set()
    for item in spec.split(","):
        item = item.strip()
        if item.isdigit():
            out.add(int(item))
            continue
        ids = [k for k, nm in trace.kernel_names.items() if nm == item]
        if not ids:
            raise UsageError(f"--offload: no kernel named {item!r}")
        out.update(ids)
    return frozenset(out)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _simulate_one(job: tuple) -> MetricsReport:
    config, trace, mech, plan, xlat, seed = job
    return Simulator(config, trace, mech, plan, xlat, mapping_seed=seed).run()


def _run_jobs(jobs: list[tuple], workers: int) -> list[MetricsReport]:
    if workers <= 1 or len(jobs) <= 1:
        return [_simulate_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_simulate_one, jobs))


# -- rendering ------------------------------------------------------------------

def _table(header: Sequence[str], rows: list[Sequence[Any]]) -> str:
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _csv(header: Sequence[str], rows: list[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def report_text(rep: MetricsReport) -> str:
    d = rep.to_dict()
    rows: list[tuple[str, Any]] = [
        ("mechanism", d["mechanism"]),
        ("xlat_mode", d["xlat_mode"]),
        ("seed", d.get("seed", "")),
        ("config_digest", d["config_digest"]),
        ("total_cycles", d["total_cycles"]),
        ("energy_total", d["energy"]["total"]),
        ("data_movement_total", d["energy"]["data_movement_total"]),
        ("data_movement_fraction", d["energy"]["data_movement_fraction"]),
    ]
    rows += [(f"energy.{k}", v) for k, v in sorted(d["energy"]["by_kind"].items())]
    rows += [(f"counter.{k}", v) for k, v in sorted(d["counters"].items())]
    text = _table(("field", "value"), rows)
    krows = [(k["id"], k["name"], k["agent"], k["cycles"], k["energy_total"], k["mpki"]) for k in d["kernels"]]
    if krows:
        text += "\n" + _table(("kernel", "name", "agent", "cycles", "energy", "mpki"), krows)
    return text


def report_csv(rep: MetricsReport) -> str:
    d = rep.to_dict()
    header = ("kernel", "name", "agent", "start", "end", "cycles", "energy_total", "energy_data_movement", "mpki")
    rows = [tuple(k[h if h != "kernel" else "id"] for h in header) for k in d["kernels"]]
    rows.append(("total", "", "", 0, d["total_cycles"], d["total_cycles"], d["energy"]["total"],
                 d["energy"]["data_movement_total"], ""))
    return _csv(header, rows)


COMPARE_HEADER = (
    "mechanism",
    "total_cycles",
    "speedup",
    "energy_total",
    "data_movement_fraction",
    "coherence_messages",
    "rollbacks",
    "offchip_bytes",
    "dram_accesses",
)


def compare_rows(reports: list[MetricsReport]) -> list[tuple]:
    base = reports[0].total_cycles
    rows = []
    for r in reports:
        c = r.counters
        rows.append(
            (
                r.mechanism,
                r.total_cycles,
                base / r.total_cycles if r.total_cycles else 1.0,
                r.ledger.total,
                r.ledger.data_movement_fraction,
                c["coherence_messages"],
                c["rollbacks"],
                c["offchip_bytes"],
                c["dram_accesses"],
            )
        )
    return rows


def _rows_json(header: Sequence[str], rows: list[Sequence[Any]], meta: dict[str, Any]) -> str:
    doc = {"schema": 1, **meta, "rows": [dict(zip(header, r)) for r in rows]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _render_rows(fmt: str, header: Sequence[str], rows: list[Sequence[Any]], meta: dict[str, Any]) -> str:
    if fmt == "csv":
        return _csv(header, rows)
    if fmt == "text":
        head = "".join(f"# {k}: {v}\n" for k, v in sorted(meta.items()))
        return head + _table(header, rows)
    return _rows_json(header, rows, meta)


# -- subcommands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    trace = generate(args.gen, args.seed)
    _emit(trace_to_text(trace), args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    config, trace = _config(args), _trace(args)
    plan = resolve_offload(trace, args.offload)
    rep = Simulator(config, trace, args.mech, plan, args.xlat, mapping_seed=args.seed).run()
    rep.extra = {"seed": args.seed, "source": _source(args), "offload": sorted(plan)}
    if args.format == "json":
        text = rep.to_json()
    elif args.format == "csv":
        text = report_csv(rep)
    else:
        text = report_text(rep)
    _emit(text, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    config, trace = _config(args), _trace(args)
    plan = resolve_offload(trace, args.offload)
    mechs = [Mechanism.CPU_ONLY, *COMPARE_MECHANISMS]
    reports = _run_jobs([(config, trace, m, plan, args.xlat, args.seed) for m in mechs], args.jobs)
    meta = {"seed": args.seed, "source": _source(args), "config_digest": config.digest(),
            "xlat_mode": PageTableMode(args.xlat).value, "offload": sorted(plan)}
    _emit(_render_rows(args.format, COMPARE_HEADER, compare_rows(reports), meta), args.out)
    return EXIT_OK


SWEEP_HEADER = ("nops", "cpu_only_cycles", "pim_cycles", "speedup", "cpu_only_energy", "pim_energy")


def cmd_sweep(args) -> int:
    config = _config(args)
    try:
        nops = [int(x) for x in args.nops.split(",")]
    except ValueError:
        raise UsageError(f"--nops must be a comma list of integers, got {args.nops!r}") from None
    if not nops or min(nops) < 1:
        raise UsageError("--nops values must be >= 1")
    jobs = []
    for n in nops:
        trace = workloads.gen_gemm_pipeline_trace(n, args.elems, seed=args.seed)
        plan = workloads.pim_kernel_ids(trace)
        jobs.append((config, trace, Mechanism.CPU_ONLY, plan, args.xlat, args.seed))
        jobs.append((config, trace, Mechanism(args.mech), plan, args.xlat, args.seed))
    reps = _run_jobs(jobs, args.jobs)
    rows = []
    for i, n in enumerate(nops):
        base, pim = reps[2 * i], reps[2 * i + 1]
        rows.append((n, base.total_cycles, pim.total_cycles, base.total_cycles / pim.total_cycles,
                     base.ledger.total, pim.ledger.total))
    meta = {"seed": args.seed, "mechanism": Mechanism(args.mech).value, "matrix_elems": args.elems,
            "config_digest": config.digest(), "xlat_mode": PageTableMode(args.xlat).value}
    _emit(_render_rows(args.format, SWEEP_HEADER, rows, meta), args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = _config(args)
    thresholds = Thresholds()
    if args.thresholds:
        with open(args.thresholds, "rb") as fh:
            thresholds = Thresholds.from_mapping(tomllib.load(fh))
    if args.profiles:
        if args.gen or args.trace:
            raise UsageError("give --profiles or a trace source, not both")
        profiles = read_profiles(args.profiles)
    else:
        profiles = profile_from_simulation(config, _trace(args), mechanism=args.mech)
    budget = args.area_budget if args.area_budget is not None else config.vault_area_budget
    coherence = Mechanism(args.mech).value
    verdicts = analyze(profiles, budget, coherence, thresholds)
    _emit(verdicts_to_json(verdicts, thresholds, budget, coherence), args.out)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def _mech(value: str) -> str:
    try:
        return Mechanism(value).value
    except ValueError:
        raise argparse.ArgumentTypeError(f"choose from {', '.join(m.value for m in Mechanism)}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="CPU + PIM memory-system simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trace_source=True, fmt=True):
        sp.add_argument("--config", help="machine config (TOML); defaults are built in")
        sp.add_argument("--seed", type=int, required=True, help="seed for generators and page mapping")
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--xlat", default="conventional", choices=[m.value for m in PageTableMode])
        if trace_source:
            sp.add_argument("--gen", help="generator spec, e.g. quantize:n=1000 or shared:n=5000,share=0.05")
            sp.add_argument("--trace", help="trace file")
        if fmt:
            sp.add_argument("--format", default="json", choices=("json", "csv", "text"))

    g = sub.add_parser("gen", help="write a generated trace")
    g.add_argument("--gen", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="simulate one mechanism")
    common(r)
    r.add_argument("--mech", type=_mech, default="fg")
    r.add_argument("--offload", help="kernel ids or names to run on PIM (comma list, or 'all')")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="cpu-only plus every coherence mechanism")
    common(c)
    c.add_argument("--offload")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_compare, format="csv")

    s = sub.add_parser("sweep-gemm", help="GEMM pipeline speedup over cpu-only vs. number of GEMM ops")
    common(s, trace_source=False)
    s.add_argument("--nops", default="1,2,4,8,16")
    s.add_argument("--elems", type=int, default=8192, help="matrix elements per GEMM op")
    s.add_argument("--mech", type=_mech, default="ideal")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep, format="csv")

    a = sub.add_parser("analyze", help="find PIM offload targets")
    common(a, fmt=False)
    a.add_argument("--profiles", help="profile CSV (skips simulation)")
    a.add_argument("--thresholds", help="TOML file overriding rule thresholds")
    a.add_argument("--area-budget", type=float, help="mm2 available for PIM logic (default: config vault budget)")
    a.add_argument("--mech", type=_mech, default="fg", help="coherence mechanism under study")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "format", None) is None:
        args.format = "json"
    try:
        return args.func(args)
    except (ConfigError, TraceError, AnalyzerError, UsageError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
