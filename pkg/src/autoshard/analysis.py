"""All static analysis products of one module, computed once up front."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .dimgraph import (
    ArgGroups,
    CompatSet,
    DimGraph,
    SetGroup,
    build_dimension_graph,
    compatibility_sets,
    group_arguments,
    group_isomorphic_sets,
)
from .ir import Module
from .nda import ColorAssignment, Mode, NdaRaw, UnionFind, analyze, param_site, quotient


@dataclass
class Analysis:
    module: Module
    raw: NdaRaw
    io: ColorAssignment
    full: ColorAssignment
    graph: DimGraph
    sets: List[CompatSet]
    groups: List[SetGroup]
    args: ArgGroups

    @cached_property
    def node_color(self) -> Dict[int, int]:
        """IOnly node -> IAndM color."""
        return {self.io.color_of[n]: self.full.color_of[n] for n in range(self.raw.num_names)}

    @cached_property
    def color_nodes(self) -> Dict[int, FrozenSet[int]]:
        out: Dict[int, set] = {c: set() for c in self.full.colors}
        for node, c in self.node_color.items():
            out[c].add(node)
        return {c: frozenset(v) for c, v in out.items()}

    @cached_property
    def color_groups(self) -> Dict[int, Tuple[int, ...]]:
        """Color -> ids of SetGroups with a conflict inside that color."""
        out: Dict[int, set] = {c: set() for c in self.full.colors}
        for grp in self.groups:
            for c in grp.conflicts:
                out[self.node_color[c.a]].add(grp.id)
        return {c: tuple(sorted(v)) for c, v in out.items()}

    @cached_property
    def units(self) -> Dict[int, Tuple[int, ...]]:
        """Mirror classes of colors induced by argument groups.

        Keyed by the smallest color of the class; an action on any member
        shards every member.
        """
        uf = UnionFind(len(self.full.colors))
        for grp in self.args.groups:
            first = grp[0]
            for other in grp[1:]:
                for n0, n1 in zip(self.raw.names[param_site(first)], self.raw.names[param_site(other)]):
                    uf.union(self.full.color_of[n0], self.full.color_of[n1])
        out: Dict[int, List[int]] = {}
        for c in sorted(self.full.colors):
            out.setdefault(uf.find(c), []).append(c)
        return {k: tuple(v) for k, v in out.items()}

    def unit_of(self, color: int) -> int:
        for k, members in self.units.items():
            if color in members:
                return k
        raise KeyError(color)

    def unit_groups(self, unit: int) -> Tuple[int, ...]:
        gs = set()
        for c in self.units[unit]:
            gs.update(self.color_groups[c])
        return tuple(sorted(gs))

    def unit_size(self, unit: int) -> int:
        """Number of dimension names sharded by an action on ``unit``."""
        return sum(len(self.full.colors[c]) for c in self.units[unit])

    def color_extents(self, color: int) -> FrozenSet[int]:
        return frozenset(self.raw.extent(n) for n in self.full.colors[color])


def analyze_module(m: Module, arg_groups: Optional[Sequence[Sequence[str]]] = None) -> Analysis:
    """Grouping, names, quotients, dimension graph and conflict structure.

    ``arg_groups`` overrides the structural argument grouping (user hints).
    """
    raw = analyze(m)
    io = quotient(raw, Mode.I_ONLY)
    full = quotient(raw, Mode.I_AND_M)
    g = build_dimension_graph(raw, io)
    sets = compatibility_sets(g)
    groups = group_isomorphic_sets(sets, g)
    args = group_arguments(m, raw)
    if arg_groups is not None:
        args = _override_groups(m, args, arg_groups)
    return Analysis(m, raw, io, full, g, sets, groups, args)


def _override_groups(m: Module, auto: ArgGroups, hint: Sequence[Sequence[str]]) -> ArgGroups:
    shapes = dict(m.params)
    seen = set()
    groups = []
    for grp in hint:
        grp = tuple(grp)
        for p in grp:
            if p not in shapes:
                raise ValueError(f"group names unknown parameter {p!r}")
            if p in seen:
                raise ValueError(f"parameter {p!r} appears in two groups")
            seen.add(p)
        if len({shapes[p].rank for p in grp}) > 1:
            raise ValueError(f"grouped parameters {grp} differ in rank")
        groups.append(grp)
    groups += [(p,) for p, _ in m.params if p not in seen]
    return ArgGroups(tuple(groups), auto.key)
