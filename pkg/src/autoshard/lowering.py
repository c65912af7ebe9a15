"""Lowering a sharding decision to a device-local program.

A :class:`ShardingState` assigns mesh axes to colors and a resolution bit to
every conflict group that a sharded color touches.  Lowering turns it into a
per-site layout (which axes split which dims), marks results that hold
partial sums, and plans the collectives needed on every def->use edge whose
layouts disagree:

* partial def, use shards the reduced color on dim j  -> ``reduce_scatter``
* partial def otherwise                              -> ``all_reduce``
* dim sharded at the def, same axes on another dim    -> ``all_to_all``
* dim sharded at the def, unsharded at the use        -> ``all_gather``
* dim unsharded at the def, sharded at the use        -> ``slice`` (local, free)

:func:`interpret_sharded` executes the result on every simulated device.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .analysis import Analysis
from .ir import (
    Binding,
    Broadcast,
    IRError,
    Mesh,
    Module,
    Shape,
    combine_stack,
    eval_op,
    format_op,
    format_shape,
)
from .nda import Site, param_site, result_site, return_site, use_site

Axes = Tuple[str, ...]
Layout = Tuple[Axes, ...]
COLLECTIVES = ("all_gather", "all_reduce", "reduce_scatter", "all_to_all")


class LoweringError(ValueError):
    def __init__(self, problems: Union[str, Sequence]):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(str(p) for p in self.problems))


@dataclass(frozen=True, order=True)
class ShardingState:
    axes_of: Tuple[Tuple[int, Axes], ...] = ()
    resolution_bits: Tuple[Tuple[int, int], ...] = ()
    mode: str = "IAndM"

    @classmethod
    def make(cls, axes_of: Mapping[int, Sequence[str]] = (), bits: Mapping[int, int] = ()) -> "ShardingState":
        axes = tuple(sorted((int(c), tuple(a)) for c, a in dict(axes_of).items() if a))
        return cls(axes, tuple(sorted((int(g), int(b)) for g, b in dict(bits).items())))

    @property
    def axes_map(self) -> Dict[int, Axes]:
        return dict(self.axes_of)

    @property
    def bits(self) -> Dict[int, int]:
        return dict(self.resolution_bits)

    def axes(self, color: int) -> Axes:
        return self.axes_map.get(color, ())

    def used_axes(self) -> List[str]:
        return [a for _, axes in self.axes_of for a in axes]

    def key(self) -> Tuple:
        return (self.axes_of, self.resolution_bits)

    def extend(
        self, colors: Iterable[int], axis: str, bits: Mapping[int, int] = (), order: Sequence[str] = ()
    ) -> "ShardingState":
        """Add ``axis`` to every color; with ``order`` the axes of each color are kept in that order."""
        rank = {a: i for i, a in enumerate(order)}
        axes = self.axes_map
        for c in colors:
            axes[c] = axes.get(c, ()) + (axis,)
            if rank:
                axes[c] = tuple(sorted(axes[c], key=lambda a: rank.get(a, len(rank))))
        b = self.bits
        b.update(bits)
        return ShardingState.make(axes, b)

    def to_json(self) -> dict:
        return {
            "colors": {str(c): list(a) for c, a in self.axes_of},
            "resolutions": {str(g): b for g, b in self.resolution_bits},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ShardingState":
        bits = doc.get("resolutions", {})
        for g, b in bits.items():
            if b not in (0, 1):
                raise ValueError(f"resolution for group {g} must be 0 or 1")
        return cls.make({int(c): a for c, a in doc.get("colors", {}).items()}, {int(g): b for g, b in bits.items()})

    def __str__(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


EMPTY_STATE = ShardingState()


@dataclass(frozen=True)
class Collective:
    kind: str  # one of COLLECTIVES, or "slice"
    axes: Axes
    src: str
    out: str
    dims: Tuple[int, ...]  # gather/slice/reduce_scatter: (dim,); all_to_all: (from, to)
    combiner: str
    subject: str  # program variable being redistributed
    before: int  # index of the consuming binding; len(bindings) for return
    shape: Shape
    layout: Layout
    src_layout: Layout


@dataclass(frozen=True)
class LocalBinding:
    var: str
    binding: Binding
    operands: Tuple[str, ...]
    layout: Layout
    partial: Optional[Tuple[Axes, str]]
    operand_layouts: Tuple[Layout, ...]


Stmt = Union[LocalBinding, Collective]


@dataclass
class ShardedModule:
    base: Module
    state: ShardingState
    dim_axes: Dict[Tuple[Site, int], Axes]
    partial: Dict[str, Tuple[Axes, str]]
    params: Tuple[Tuple[str, Layout], ...]
    stmts: List[Stmt]
    result: str
    result_layout: Layout

    @property
    def collectives(self) -> List[Collective]:
        return [s for s in self.stmts if isinstance(s, Collective) and s.kind in COLLECTIVES]

    def layout(self, site: Site, rank: int) -> Layout:
        return tuple(self.dim_axes.get((site, i), ()) for i in range(rank))

    def count(self, kind: str) -> int:
        return sum(1 for c in self.stmts if isinstance(c, Collective) and c.kind == kind)


@dataclass(frozen=True)
class Violation:
    site: str
    axis: str
    dims: Tuple[int, ...]
    message: str

    def __str__(self) -> str:
        return f"{self.site}: {self.message}"


# --- from state to per-node axes -----------------------------------------


def required_groups(an: Analysis, state: ShardingState) -> Tuple[int, ...]:
    gs = set()
    for c, _ in state.axes_of:
        gs.update(an.color_groups.get(c, ()))
    return tuple(sorted(gs))


def node_axes(an: Analysis, state: ShardingState) -> Dict[int, Axes]:
    """Axes of every IOnly node after conflict resolution."""
    bits = state.bits
    losers = set()
    for gid in required_groups(an, state):
        if gid not in bits:
            raise LoweringError(f"missing resolution bit for conflict group {gid}")
        losers.update(an.groups[gid].losers(bits[gid]))
    amap = state.axes_map
    out = {}
    for node, color in an.node_color.items():
        axes = amap.get(color, ())
        out[node] = () if node in losers else axes
    return out


def _colors_with(state: ShardingState, axis: str) -> List[int]:
    return [c for c, axes in state.axes_of if axis in axes]


def check_state(an: Analysis, state: ShardingState, mesh: Mesh) -> List[str]:
    """Problems that make ``state`` unloweable; empty if it is valid."""
    problems = []
    used = state.used_axes()
    for a in used:
        if a not in mesh.names:
            problems.append(f"axis {a!r} is not in the mesh")
    # mirrored colors (one argument-group unit) share their axes
    owners: Dict[str, set] = {}
    for c, axes in state.axes_of:
        for a in axes:
            owners.setdefault(a, set()).add(an.unit_of(c) if c in an.full.colors else c)
    dup = sorted(a for a, us in owners.items() if len(us) > 1 or used.count(a) > len(_colors_with(state, a)))
    if dup:
        problems.append(f"axes {dup} shard colors that are not argument-group mirrors")
    for c, axes in state.axes_of:
        if c not in an.full.colors:
            problems.append(f"unknown color {c}")
            continue
        if any(a not in mesh.names for a in axes):
            continue
        n = mesh.group_size(axes)
        bad = sorted(e for e in an.color_extents(c) if e % n)
        if bad:
            problems.append(f"color {c}: extents {bad} not divisible by {n}")
    if problems:
        return problems
    try:
        nax = node_axes(an, state)
    except LoweringError as e:
        return e.problems
    io = an.io.color_of
    raw = an.raw
    for site in raw.sites:
        seen: Dict[str, int] = {}
        for i, name in enumerate(raw.names[site]):
            for a in nax[io[name]]:
                if a in seen:
                    problems.append(f"axis {a!r} shards dims {seen[a]} and {i} of {site}")
                seen[a] = i
    return problems


# --- edge planning ------------------------------------------------------


@dataclass(frozen=True)
class _Step:
    kind: str
    axes: Axes
    dims: Tuple[int, ...]
    combiner: str
    layout: Layout


def plan_edge(d: Layout, partial: Optional[Tuple[Axes, str]], u: Layout) -> List[_Step]:
    """Collectives turning a value laid out as ``d`` (+partial) into ``u``."""
    cur = list(d)
    steps = []
    if partial:
        axes, comb = partial
        j = next((j for j, ax in enumerate(u) if ax == axes and not cur[j]), None)
        if j is not None:
            cur[j] = axes
            steps.append(_Step("reduce_scatter", axes, (j,), comb, tuple(cur)))
        else:
            steps.append(_Step("all_reduce", axes, (), comb, tuple(cur)))
    for i in range(len(cur)):
        if not cur[i] or cur[i] == u[i]:
            continue
        axes = cur[i]
        if u[i]:
            raise LoweringError(f"dim {i} goes from {axes} to {u[i]}; colors must not share axes")
        j = next((j for j, ax in enumerate(u) if ax == axes and not cur[j] and j != i), None)
        cur[i] = ()
        if j is not None:
            cur[j] = axes
            steps.append(_Step("all_to_all", axes, (i, j), "add", tuple(cur)))
        else:
            steps.append(_Step("all_gather", axes, (i,), "add", tuple(cur)))
    for j in range(len(cur)):
        if u[j] and cur[j] != u[j]:
            cur[j] = u[j]
            steps.append(_Step("slice", u[j], (j,), "add", tuple(cur)))
    assert tuple(cur) == tuple(u)
    return steps


def apply(an: Analysis, state: ShardingState, mesh: Mesh) -> ShardedModule:
    problems = check_state(an, state, mesh)
    if problems:
        raise LoweringError(problems)
    m, raw = an.module, an.raw
    nax = node_axes(an, state)
    io = an.io.color_of

    def layout(site: Site) -> Layout:
        return tuple(nax[io[n]] for n in raw.names[site])

    dim_axes = {}
    for site in raw.sites:
        for i, n in enumerate(raw.names[site]):
            if nax[io[n]]:
                dim_axes[(site, i)] = nax[io[n]]

    partial: Dict[str, Tuple[Axes, str]] = {}
    for b in m.bindings:
        if b.var in raw.contracted and nax[io[raw.contracted[b.var]]]:
            partial[b.var] = (nax[io[raw.contracted[b.var]]], "add")
        elif b.var in raw.reduced and nax[io[raw.reduced[b.var]]]:
            partial[b.var] = (nax[io[raw.reduced[b.var]]], b.op.combiner)

    params = {p for p, _ in m.params}
    shapes = m.shapes()

    def def_site(var: str) -> Site:
        return param_site(var) if var in params else result_site(var)

    # records: [key, src_ref, step, subject, before]
    records: List[dict] = []
    index: Dict[Tuple, int] = {}

    def route(var: str, u: Layout, before: int) -> Tuple:
        ref: Tuple = ("var", var)
        for st in plan_edge(layout(def_site(var)), partial.get(var), u):
            key = (ref, st.kind, st.axes, st.dims, st.combiner)
            if key not in index:
                index[key] = len(records)
                records.append(dict(src=ref, step=st, subject=var, before=before))
            ref = ("step", index[key])
        return ref

    operand_refs = []
    for bi, b in enumerate(m.bindings):
        operand_refs.append(
            [route(v, layout(use_site(b.var, pos)), bi) for pos, v in enumerate(b.operands)]
        )
    result_ref = route(m.result, layout(return_site(m.result)), len(m.bindings))

    # naming: a partial def resolved by one collective becomes ``v_`` and the
    # collective takes over ``v``
    taken = set(shapes)
    local = {v: v for v in shapes}
    rec_name: Dict[int, str] = {}

    def fresh(base: str) -> str:
        cand = base + "_"
        k = 1
        while cand in taken:
            cand = f"{base}_{k}"
            k += 1
        taken.add(cand)
        return cand

    for var in partial:
        resolving = [
            i for i, r in enumerate(records)
            if r["src"] == ("var", var) and r["step"].kind in ("all_reduce", "reduce_scatter")
        ]
        if len(resolving) == 1:
            local[var] = fresh(var)
            rec_name[resolving[0]] = var
    for i, r in enumerate(records):
        if i not in rec_name:
            rec_name[i] = fresh(r["subject"])

    def name_of(ref: Tuple) -> str:
        return local[ref[1]] if ref[0] == "var" else rec_name[ref[1]]

    def src_layout(ref: Tuple) -> Layout:
        if ref[0] == "var":
            return layout(def_site(ref[1]))
        return records[ref[1]]["step"].layout

    def collective(i: int) -> Collective:
        r = records[i]
        st = r["step"]
        return Collective(
            st.kind, st.axes, name_of(r["src"]), rec_name[i], st.dims, st.combiner,
            r["subject"], r["before"], shapes[r["subject"]], st.layout, src_layout(r["src"]),
        )

    stmts: List[Stmt] = []
    by_before: Dict[int, List[int]] = {}
    for i, r in enumerate(records):
        by_before.setdefault(r["before"], []).append(i)
    for bi, b in enumerate(m.bindings):
        stmts.extend(collective(i) for i in by_before.get(bi, ()))
        stmts.append(
            LocalBinding(
                local[b.var], b, tuple(name_of(ref) for ref in operand_refs[bi]),
                layout(result_site(b.var)), partial.get(b.var),
                tuple(layout(use_site(b.var, pos)) for pos in range(len(b.operands))),
            )
        )
    stmts.extend(collective(i) for i in by_before.get(len(m.bindings), ()))

    return ShardedModule(
        base=m,
        state=state,
        dim_axes=dim_axes,
        partial=partial,
        params=tuple((p, layout(param_site(p))) for p, _ in m.params),
        stmts=stmts,
        result=name_of(result_ref),
        result_layout=layout(return_site(m.result)),
    )


# --- validation ----------------------------------------------------------


def local_dims(shape: Shape, lay: Layout, mesh: Mesh) -> Tuple[int, ...]:
    return tuple(d // mesh.group_size(a) for d, a in zip(shape.dims, lay))


def validate(sm: ShardedModule, mesh: Mesh) -> List[Violation]:
    """Invariant violations of ``sm`` against ``mesh`` (empty means ok)."""
    out: List[Violation] = []
    shapes = sm.base.shapes()

    def check_layout(label: str, shape: Shape, lay: Layout):
        seen: Dict[str, int] = {}
        for i, axes in enumerate(lay):
            for a in axes:
                if a not in mesh.names:
                    out.append(Violation(label, a, (i,), f"axis {a!r} is not in the mesh"))
                    continue
                if a in seen:
                    out.append(
                        Violation(label, a, (seen[a], i), f"axis {a!r} shards dims {seen[a]} and {i}")
                    )
                seen[a] = i
            if all(a in mesh.names for a in axes) and shape.dims[i] % mesh.group_size(axes):
                out.append(
                    Violation(label, ",".join(axes), (i,), f"extent {shape.dims[i]} of dim {i} not divisible")
                )

    sites: Dict[Site, int] = {}
    for (site, i) in sm.dim_axes:
        sites[site] = 0
    for p, lay in sm.params:
        check_layout(p, shapes[p], lay)
    for st in sm.stmts:
        if isinstance(st, LocalBinding):
            check_layout(st.var, st.binding.result_shape, st.layout)
            for pos, lay in enumerate(st.operand_layouts):
                check_layout(f"{st.var}#{pos}", shapes[st.binding.operands[pos]], lay)
        else:
            if not st.axes:
                out.append(Violation(st.out, "", st.dims, f"{st.kind} has an empty axis set"))
            check_layout(st.out, st.shape, st.layout)
    check_layout(f"return {sm.result}", shapes[sm.base.result], sm.result_layout)
    return out


# --- printing ------------------------------------------------------------


def print_sharded(sm: ShardedModule) -> str:
    m = sm.base
    shapes = m.shapes()
    params = ", ".join(f"{p}: {format_shape(shapes[p], lay)}" for p, lay in sm.params)
    lines = [f"def {m.name}({params}) {{"]
    for st in sm.stmts:
        if isinstance(st, LocalBinding):
            rhs = f"{format_op(st.binding.op)}({', '.join(st.operands)})"
            lines.append(f"  {st.var}: {format_shape(st.binding.result_shape, st.layout)} = {rhs}")
        else:
            kind = st.kind
            if kind in ("all_reduce", "reduce_scatter") and st.combiner != "add":
                kind = f"{kind}[{st.combiner}]"
            lines.append(
                f"  {st.out}: {format_shape(st.shape, st.layout)} = {kind} {{{','.join(st.axes)}}} {st.src}"
            )
    lines.append(f"  return {sm.result}")
    lines.append("}")
    return "\n".join(lines) + "\n"


# --- simulated SPMD execution -------------------------------------------


class _Devices:
    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.names = mesh.names
        self.all = list(itertools.product(*[range(n) for _, n in mesh.axes]))
        self._groups: Dict[Tuple, List[Tuple]] = {}

    def block(self, dev: Tuple, axes: Axes) -> int:
        idx = 0
        for a in axes:
            idx = idx * self.mesh.size(a) + dev[self.names.index(a)]
        return idx

    def group(self, dev: Tuple, axes: Axes) -> List[Tuple]:
        """Devices sharing ``dev``'s coordinates off ``axes``, in block order."""
        key = (dev, axes)
        if key not in self._groups:
            pos = [self.names.index(a) for a in axes]
            members = [
                d for d in self.all
                if all(d[k] == dev[k] for k in range(len(dev)) if k not in pos)
            ]
            members.sort(key=lambda d: self.block(d, axes))
            self._groups[key] = members
        return self._groups[key]

    def take(self, arr: np.ndarray, lay: Layout, dev: Tuple) -> np.ndarray:
        idx = []
        for i, axes in enumerate(lay):
            if not axes:
                idx.append(slice(None))
                continue
            n = self.mesh.group_size(axes)
            size = arr.shape[i] // n
            k = self.block(dev, axes)
            idx.append(slice(k * size, (k + 1) * size))
        return arr[tuple(idx)]


def _split(x: np.ndarray, n: int, axis: int) -> List[np.ndarray]:
    if x.shape[axis] % n:
        raise LoweringError(f"cannot split extent {x.shape[axis]} into {n} parts")
    return np.split(x, n, axis=axis)


def run_collective(c: Collective, vals: Dict[Tuple, np.ndarray], devs: _Devices) -> Dict[Tuple, np.ndarray]:
    """MPI-style semantics over the axis group of every device."""
    out = {}
    for dev in devs.all:
        grp = devs.group(dev, c.axes)
        n = len(grp)
        k = devs.block(dev, c.axes)
        if c.kind == "all_gather":
            out[dev] = np.concatenate([vals[g] for g in grp], axis=c.dims[0])
        elif c.kind == "all_reduce":
            out[dev] = combine_stack([vals[g] for g in grp], c.combiner)
        elif c.kind == "reduce_scatter":
            total = combine_stack([vals[g] for g in grp], c.combiner)
            out[dev] = _split(total, n, c.dims[0])[k]
        elif c.kind == "all_to_all":
            src_dim, dst_dim = c.dims
            out[dev] = np.concatenate(
                [_split(vals[g], n, dst_dim)[k] for g in grp], axis=src_dim
            )
        elif c.kind == "slice":
            out[dev] = _split(vals[dev], n, c.dims[0])[k]
        else:
            raise LoweringError(f"unknown collective {c.kind}")
    return out


def interpret_sharded(sm: ShardedModule, mesh: Mesh, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Run ``sm`` on every device of ``mesh`` and reassemble the global result."""
    devs = _Devices(mesh)
    m = sm.base
    shapes = m.shapes()
    env: Dict[str, Dict[Tuple, np.ndarray]] = {}
    for p, lay in sm.params:
        if p not in inputs:
            raise IRError(f"missing input {p!r}")
        g = np.asarray(inputs[p])
        if g.shape != shapes[p].dims:
            raise IRError(f"input {p!r} has shape {g.shape}, expected {shapes[p].dims}")
        env[p] = {d: devs.take(g, lay, d) for d in devs.all}

    def expect(name: str, vals: Dict, shape: Shape, lay: Layout):
        want = local_dims(shape, lay, mesh)
        for d, v in vals.items():
            if v.shape != want:
                raise LoweringError(
                    f"{name}: device {d} holds shape {v.shape}, layout implies {want}"
                )

    for st in sm.stmts:
        if isinstance(st, LocalBinding):
            b = st.binding
            for name, lay, var in zip(st.operands, st.operand_layouts, b.operands):
                expect(name, env[name], shapes[var], lay)
            extent = None
            if isinstance(b.op, Broadcast):
                extent = b.op.extent // mesh.group_size(st.layout[b.op.l])
            vals = {
                d: eval_op(b.op, [env[v][d] for v in st.operands], extent) for d in devs.all
            }
            expect(st.var, vals, b.result_shape, st.layout)
            env[st.var] = vals
        else:
            expect(st.src, env[st.src], st.shape, st.src_layout)
            vals = run_collective(st, env[st.src], devs)
            expect(st.out, vals, st.shape, st.layout)
            env[st.out] = vals

    res_shape = shapes[m.result]
    vals = env[sm.result]
    expect(sm.result, vals, res_shape, sm.result_layout)
    first = next(iter(vals.values()))
    out = np.zeros(res_shape.dims, dtype=first.dtype)
    filled = np.zeros(res_shape.dims, dtype=bool)
    for d in devs.all:
        idx = []
        for i, axes in enumerate(sm.result_layout):
            if not axes:
                idx.append(slice(None))
                continue
            size = res_shape.dims[i] // mesh.group_size(axes)
            k = devs.block(d, axes)
            idx.append(slice(k * size, (k + 1) * size))
        idx = tuple(idx)
        region = filled[idx]
        if region.any():
            if not np.array_equal(out[idx], vals[d], equal_nan=True):
                raise LoweringError(f"replicas of the result disagree on device {d}")
        else:
            out[idx] = vals[d]
            filled[idx] = True
    if not filled.all():
        raise LoweringError("result shards do not cover the output")
    return out
