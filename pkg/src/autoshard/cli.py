"""Command line driver: parse, analyze, search, lower, verify."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .analysis import Analysis, analyze_module
from .cost import CostOptions, estimate, score
from .dimgraph import conflicts_json, export_dot
from .ir import IRError, MachineSpec, Mesh, Module, interpret, parse_module
from .lowering import EMPTY_STATE, LoweringError, ShardingState, apply, interpret_sharded, print_sharded, validate
from .nda import dump_json
from .search import SearchConfig, mcts_search


class CliError(Exception):
    pass


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_module(path: str) -> Module:
    text = Path(path).read_text()
    try:
        return parse_module(text)
    except IRError as e:
        raise CliError(f"{path}:{e}") from e


def load_groups(path: Optional[str]) -> Optional[List[List[str]]]:
    """``[["wq", "wk"], ...]`` or ``{"groups": [...]}``."""
    if not path:
        return None
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc.get("groups", [])
    if not isinstance(doc, list) or not all(isinstance(g, list) for g in doc):
        raise CliError(f"{path}: expected a list of parameter-name lists")
    return doc


def load_machine(path: Optional[str], mesh: Mesh) -> MachineSpec:
    if not path:
        return MachineSpec.default(mesh)
    return MachineSpec.from_json(json.loads(Path(path).read_text()))


def random_inputs(m: Module, seed: int) -> dict:
    # small integers keep sums exact regardless of reduction order
    rng = np.random.default_rng(seed)
    return {p: rng.integers(1, 5, size=s.dims).astype(np.float64) for p, s in m.params}


def load_inputs(path: Optional[str], m: Module, seed: int) -> dict:
    if not path:
        return random_inputs(m, seed)
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def check_equivalent(m: Module, sm, mesh: Mesh, inputs: dict) -> None:
    ref = interpret(m, inputs)
    got = interpret_sharded(sm, mesh, inputs)
    if np.issubdtype(ref.dtype, np.integer):
        ok = np.array_equal(ref, got)
    else:
        ok = np.allclose(got, ref, rtol=1e-5, atol=1e-8)
    if not ok:
        raise CliError("sharded program disagrees with the reference interpreter")


def dump_analysis(an: Analysis, args) -> None:
    if args.dump_nda:
        _write(args.dump_nda, _json(dump_json(an.raw, an.io, an.full)))
    if args.dump_graph:
        _write(args.dump_graph, export_dot(an.graph, an.module.name))
    if args.dump_conflicts:
        _write(args.dump_conflicts, _json(conflicts_json(an.graph, an.sets, an.groups)))


def _report(an, sm, mesh, spec, state, options, penalty, trace=None) -> dict:
    base = estimate(apply(an, EMPTY_STATE, mesh), mesh, spec, options)
    rep = estimate(sm, mesh, spec, options)
    doc = {
        "module": an.module.name,
        "mesh": str(mesh),
        "machine": spec.to_json(),
        "state": state.to_json(),
        "score": score(rep, base, spec, penalty).to_json(),
        "cost": rep.to_json(),
        "baseline": base.to_json(),
        "collectives": [
            {"kind": c.kind, "axes": list(c.axes), "value": c.out, "source": c.src}
            for c in sm.collectives
        ],
    }
    if trace is not None:
        doc["search"] = trace
    return doc


def _lower(an, state, mesh):
    sm = apply(an, state, mesh)
    bad = validate(sm, mesh)
    if bad:
        raise CliError("invalid sharded module: " + "; ".join(map(str, bad)))
    return sm


def cmd_analyze(args) -> int:
    m = load_module(args.input)
    an = analyze_module(m, load_groups(args.groups))
    dump_analysis(an, args)
    summary = {
        "module": m.name,
        "colors": len(an.full.colors),
        "nodes": len(an.graph.nodes),
        "conflicts": len(an.graph.conflicts),
        "compatibility_sets": len(an.sets),
        "set_groups": len(an.groups),
        "resolutions": 2 ** len(an.groups),
        "argument_groups": [list(g) for g in an.args.groups],
    }
    print(_json(summary), end="")
    return 0


def _search_config(args) -> SearchConfig:
    return SearchConfig(
        budget=args.budget,
        max_depth=args.max_depth,
        min_unique_dims=args.min_dims,
        seed=args.seed,
        workers=args.workers,
        penalty_constant=args.memory_penalty,
        early_stop_rounds=args.early_stop_rounds,
        cost_options=CostOptions(elementwise_roofline=args.elementwise_roofline),
    )


def cmd_partition(args) -> int:
    m = load_module(args.input)
    mesh = Mesh.parse(args.mesh)
    spec = load_machine(args.machine, mesh)
    cfg = _search_config(args)
    an = analyze_module(m, load_groups(args.groups))
    dump_analysis(an, args)
    res = mcts_search(m, mesh, spec, cfg, an)
    sm = _lower(an, res.best_state, mesh)
    if args.verify:
        check_equivalent(m, sm, mesh, random_inputs(m, args.seed))
    _write(args.emit_sharded, print_sharded(sm))
    if args.report:
        doc = _report(an, sm, mesh, spec, res.best_state, cfg.cost_options, cfg.penalty_constant, res.trace_json())
        _write(args.report, _json(doc))
    return 0


def _load_state(path: str) -> ShardingState:
    return ShardingState.from_json(json.loads(Path(path).read_text()))


def cmd_apply(args) -> int:
    m = load_module(args.input)
    mesh = Mesh.parse(args.mesh)
    spec = load_machine(args.machine, mesh)
    an = analyze_module(m, load_groups(args.groups))
    state = _load_state(args.state)
    sm = _lower(an, state, mesh)
    if args.verify:
        check_equivalent(m, sm, mesh, random_inputs(m, args.seed))
    _write(args.emit_sharded, print_sharded(sm))
    if args.report:
        opts = CostOptions(elementwise_roofline=args.elementwise_roofline)
        _write(args.report, _json(_report(an, sm, mesh, spec, state, opts, args.memory_penalty)))
    return 0


def cmd_simulate(args) -> int:
    m = load_module(args.input)
    mesh = Mesh.parse(args.mesh)
    an = analyze_module(m, load_groups(args.groups))
    state = _load_state(args.state) if args.state else EMPTY_STATE
    sm = _lower(an, state, mesh)
    check_equivalent(m, sm, mesh, load_inputs(args.inputs, m, args.seed))
    print(f"ok: {m.name} on {mesh.num_devices} devices matches the reference")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autoshard", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mesh: bool):
        sp.add_argument("input", help="program in the text IR")
        sp.add_argument("--groups", help="JSON list of parameter groups overriding argument grouping")
        if mesh:
            sp.add_argument("--mesh", required=True, help="mesh axes, e.g. b=2,m=4")
            sp.add_argument("--machine", help="machine spec JSON")
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--memory-penalty", type=float, default=100.0)
            sp.add_argument("--elementwise-roofline", action="store_true")

    def dumps(sp):
        sp.add_argument("--dump-nda", help="write dimension names and colors as JSON")
        sp.add_argument("--dump-graph", help="write the dimension graph as DOT")
        sp.add_argument("--dump-conflicts", help="write conflicts, sets and groups as JSON")

    def outputs(sp):
        sp.add_argument("--emit-sharded", help="sharded IR output path (default stdout)")
        sp.add_argument("--report", help="cost report JSON output path")
        sp.add_argument("--verify", action=argparse.BooleanOptionalAction, default=True,
                        help="check the result against the reference interpreter")

    a = sub.add_parser("analyze", help="run the static analyses and dump them")
    common(a, mesh=False)
    dumps(a)
    a.set_defaults(func=cmd_analyze)

    pt = sub.add_parser("partition", help="search for a sharding and lower it")
    common(pt, mesh=True)
    dumps(pt)
    outputs(pt)
    pt.add_argument("--budget", type=int, default=500)
    pt.add_argument("--workers", type=int, default=1)
    pt.add_argument("--max-depth", type=int, default=30)
    pt.add_argument("--min-dims", type=int, default=10)
    pt.add_argument("--early-stop-rounds", type=int, default=2)
    pt.set_defaults(func=cmd_partition)

    ap = sub.add_parser("apply", help="lower an explicit sharding state")
    common(ap, mesh=True)
    outputs(ap)
    ap.add_argument("--state", required=True, help="sharding state JSON")
    ap.set_defaults(func=cmd_apply)

    sm = sub.add_parser("simulate", help="check a sharding against the reference interpreter")
    common(sm, mesh=True)
    sm.add_argument("--state", help="sharding state JSON (default: replicated)")
    sm.add_argument("--inputs", help=".npz file with one array per parameter (default: random)")
    sm.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, IRError, LoweringError, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
