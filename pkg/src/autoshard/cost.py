"""Analytical cost model: matmul compute, ring collectives, live-range memory."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Sequence, Tuple

from .ir import MachineSpec, Matmul, Mesh, op_family
from .lowering import LocalBinding, ShardedModule, local_dims

DEFAULT_PENALTY = 100.0


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class OpCost:
    name: str
    kind: str
    secs: float
    nbytes: int = 0


@dataclass(frozen=True)
class CostReport:
    compute_secs: float
    comm_secs: float
    runtime_secs: float
    peak_bytes: int
    breakdown: Tuple[OpCost, ...] = ()

    def to_json(self) -> dict:
        return {
            "compute_secs": self.compute_secs,
            "comm_secs": self.comm_secs,
            "runtime_secs": self.runtime_secs,
            "peak_bytes": self.peak_bytes,
            "breakdown": [asdict(o) for o in self.breakdown],
        }


@dataclass(frozen=True)
class Score:
    rt: float
    mp: float
    c: float
    dm: float
    penalty_constant: float

    def to_json(self) -> dict:
        return asdict(self)


# --- collective formulas --------------------------------------------------

# (kind, group size n, input local bytes, output local bytes, bandwidth) -> secs
CollectiveFormula = Callable[[str, int, int, int, float], float]


def ring_formula(kind: str, n: int, b_in: int, b_out: int, bw: float) -> float:
    f = (n - 1) / n
    if kind == "all_gather":
        return f * (b_in * n) / bw
    if kind == "reduce_scatter":
        return f * (b_out * n) / bw
    if kind == "all_reduce":
        return 2 * f * (b_in * n) / bw
    if kind == "all_to_all":
        return f * b_in / bw
    if kind == "slice":
        return 0.0
    raise CostError(f"no cost formula for {kind!r}")


STRATEGIES: Dict[str, CollectiveFormula] = {"ring": ring_formula}


def register_strategy(name: str, formula: CollectiveFormula) -> None:
    STRATEGIES[name] = formula


@dataclass(frozen=True)
class CostOptions:
    strategy: str = "ring"
    # add byte-bound time for non-matmul ops; needs spec.hbm_bytes_per_sec
    elementwise_roofline: bool = False


def group_bandwidth(spec: MachineSpec, axes: Sequence[str]) -> float:
    """A multi-axis group is as fast as its slowest link."""
    bws = []
    for a in axes:
        if a not in spec.bytes_per_sec:
            raise CostError(f"machine spec has no bandwidth for axis {a!r}")
        bws.append(spec.bytes_per_sec[a])
    return min(bws)


def _nbytes(dims: Sequence[int], elem: int) -> int:
    return math.prod(dims) * elem


def value_bytes(sm: ShardedModule, mesh: Mesh) -> Dict[str, int]:
    """Device-local bytes of every local value (params, bindings, collectives)."""
    elem = sm.base.elem_bytes
    shapes = sm.base.shapes()
    out = {p: _nbytes(local_dims(shapes[p], lay, mesh), elem) for p, lay in sm.params}
    for st in sm.stmts:
        if isinstance(st, LocalBinding):
            out[st.var] = _nbytes(local_dims(st.binding.result_shape, st.layout, mesh), elem)
        else:
            out[st.out] = _nbytes(local_dims(st.shape, st.layout, mesh), elem)
    return out


def live_ranges(sm: ShardedModule) -> Dict[str, Tuple[int, int]]:
    """name -> (first point, last point); params start at -1, the return at len(stmts)."""
    ranges: Dict[str, List[int]] = {p: [-1, -1] for p, _ in sm.params}
    for i, st in enumerate(sm.stmts):
        ins = st.operands if isinstance(st, LocalBinding) else (st.src,)
        for v in ins:
            ranges[v][1] = i
        out = st.var if isinstance(st, LocalBinding) else st.out
        ranges[out] = [i, i]
    ranges[sm.result][1] = len(sm.stmts)
    return {k: (a, b) for k, (a, b) in ranges.items()}


def peak_memory(sm: ShardedModule, mesh: Mesh) -> int:
    sizes = value_bytes(sm, mesh)
    ranges = live_ranges(sm)
    # sweep: +size at start, -size after end
    events: Dict[int, int] = {}
    for v, (a, b) in ranges.items():
        events[a] = events.get(a, 0) + sizes[v]
        events[b + 1] = events.get(b + 1, 0) - sizes[v]
    live = peak = 0
    for t in sorted(events):
        live += events[t]
        peak = max(peak, live)
    return peak


def estimate(
    sm: ShardedModule, mesh: Mesh, spec: MachineSpec, options: CostOptions = CostOptions()
) -> CostReport:
    if options.strategy not in STRATEGIES:
        raise CostError(f"unknown collective strategy {options.strategy!r}")
    formula = STRATEGIES[options.strategy]
    shapes = sm.base.shapes()
    sizes = value_bytes(sm, mesh)
    breakdown: List[OpCost] = []
    compute = comm = 0.0
    for st in sm.stmts:
        if isinstance(st, LocalBinding):
            b = st.binding
            if isinstance(b.op, Matmul):
                m_, k_ = local_dims(shapes[b.operands[0]], st.operand_layouts[0], mesh)
                _, n_ = local_dims(shapes[b.operands[1]], st.operand_layouts[1], mesh)
                secs = 2 * m_ * n_ * k_ / spec.flops_per_sec
            elif options.elementwise_roofline:
                if not spec.hbm_bytes_per_sec:
                    raise CostError("elementwise roofline needs hbm_bytes_per_sec")
                moved = sizes[st.var] + sum(sizes[v] for v in st.operands)
                secs = moved / spec.hbm_bytes_per_sec
            else:
                secs = 0.0
            compute += secs
            breakdown.append(OpCost(st.var, op_family(b.op), secs))
        else:
            n = mesh.group_size(st.axes)
            b_in, b_out = sizes[st.src], sizes[st.out]
            bw = group_bandwidth(spec, st.axes)
            secs = formula(st.kind, n, b_in, b_out, bw)
            comm += secs
            breakdown.append(OpCost(st.out, st.kind, secs, b_in))
    runtime = math.fsum(o.secs for o in breakdown)
    return CostReport(compute, comm, runtime, peak_memory(sm, mesh), tuple(breakdown))


def score(
    r: CostReport,
    baseline: CostReport,
    spec: MachineSpec,
    penalty_constant: float = DEFAULT_PENALTY,
) -> Score:
    dm = spec.device_memory_bytes
    if baseline.runtime_secs > 0:
        rt = r.runtime_secs / baseline.runtime_secs
    elif r.runtime_secs == 0:
        rt = 1.0  # nothing costs anything in either program
    else:
        raise CostError("baseline runtime is zero; nothing to compare against")
    mp = penalty_constant * (r.peak_bytes - dm) / baseline.peak_bytes if r.peak_bytes > dm else 0.0
    return Score(rt, mp, rt + mp, dm, penalty_constant)
