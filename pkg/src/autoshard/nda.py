"""Named dimension analysis.

Every dimension of every definition site (parameters, binding results) and
every use site (operands, the returned variable) gets a fresh integer name.
The analysis records

* ``M``: def -> use edges between names, one per dimension of every use, and
* ``I``: per-op identities saying which names can be sharded together.

Quotienting names by ``I`` alone gives one class per way an op can be split;
quotienting by ``I`` and ``M`` gives the colors of whole-program shardings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Tuple

from .ir import (
    Broadcast,
    ElementwiseBinary,
    ElementwiseUnary,
    Matmul,
    Module,
    Reduce,
    Transpose,
)

RETURN = "<return>"


@dataclass(frozen=True, order=True)
class Site:
    """A program location annotated by a vector of dimension names.

    ``kind`` is one of ``param``, ``result``, ``use`` (operand ``pos`` of
    binding ``var``) or ``return``.
    """

    kind: str
    var: str
    pos: int = -1

    def __str__(self) -> str:
        if self.kind == "use":
            return f"{self.var}#{self.pos}"
        if self.kind == "return":
            return f"return {self.var}"
        return self.var


def param_site(p: str) -> Site:
    return Site("param", p)


def result_site(var: str) -> Site:
    return Site("result", var)


def use_site(var: str, pos: int) -> Site:
    return Site("use", var, pos)


def return_site(var: str) -> Site:
    return Site("return", var)


@dataclass
class NdaRaw:
    module: Module
    sites: List[Site]  # program order
    names: Dict[Site, Tuple[int, ...]]
    site_of: List[Site]  # indexed by name id
    index_of: List[int]
    M: List[Tuple[int, int]]
    I: List[Tuple[int, int]]
    # per binding: the operand-use names that disappear from the result
    contracted: Dict[str, int] = field(default_factory=dict)
    reduced: Dict[str, int] = field(default_factory=dict)
    fresh: Dict[str, int] = field(default_factory=dict)
    extents: List[int] = field(default_factory=list)

    @property
    def num_names(self) -> int:
        return len(self.site_of)

    def def_site(self, var: str) -> Site:
        if any(p == var for p, _ in self.module.params):
            return param_site(var)
        return result_site(var)

    def extent(self, name: int) -> int:
        return self.extents[name]

    def site_var(self, site: Site) -> str:
        """Name of the tensor variable living at ``site``."""
        if site.kind == "use":
            return self.module.binding(site.var).operands[site.pos]
        return site.var


def analyze(m: Module) -> NdaRaw:
    """Run the analysis in a single pass over ``m`` in program order."""
    sites: List[Site] = []
    names: Dict[Site, Tuple[int, ...]] = {}
    site_of: List[Site] = []
    index_of: List[int] = []
    M: List[Tuple[int, int]] = []
    I: List[Tuple[int, int]] = []
    env: Dict[str, Tuple[int, ...]] = {}
    raw = NdaRaw(m, sites, names, site_of, index_of, M, I)

    def fresh(site: Site, rank: int) -> Tuple[int, ...]:
        ids = []
        for i in range(rank):
            ids.append(len(site_of))
            site_of.append(site)
            index_of.append(i)
        names[site] = tuple(ids)
        sites.append(site)
        return names[site]

    def use(var: str, site: Site) -> Tuple[int, ...]:
        d = env[var]
        a = fresh(site, len(d))
        M.extend(zip(d, a))
        return a

    for p, s in m.params:
        env[p] = fresh(param_site(p), s.rank)

    for b in m.bindings:
        args = [use(v, use_site(b.var, i)) for i, v in enumerate(b.operands)]
        op = b.op
        out = fresh(result_site(b.var), b.result_shape.rank)
        if isinstance(op, Matmul):
            (d1, d2), (c1, c2) = args
            I.extend([(out[0], d1), (out[1], c2), (d2, c1)])
            raw.contracted[b.var] = d2
        elif isinstance(op, ElementwiseBinary):
            d, c = args
            for a, di, ci in zip(out, d, c):
                I.extend([(a, di), (a, ci)])
        elif isinstance(op, ElementwiseUnary):
            I.extend(zip(out, args[0]))
        elif isinstance(op, Reduce):
            d = args[0]
            kept = d[: op.r] + d[op.r + 1 :]
            I.extend(zip(out, kept))
            raw.reduced[b.var] = d[op.r]
        elif isinstance(op, Transpose):
            d = list(args[0])
            d[op.l], d[op.r] = d[op.r], d[op.l]
            I.extend(zip(out, d))
        elif isinstance(op, Broadcast):
            d = args[0]
            rest = out[: op.l] + out[op.l + 1 :]
            I.extend(zip(rest, d))
            raw.fresh[b.var] = out[op.l]
        else:
            raise TypeError(f"no analysis rule for {op!r}")
        env[b.var] = out

    use(m.result, return_site(m.result))
    shapes = m.shapes()
    raw.extents = [shapes[raw.site_var(site_of[n])].dims[index_of[n]] for n in range(len(site_of))]
    return raw


class UnionFind:
    """Union-find over ``0..n-1``; the root of a class is its smallest member."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, k: int) -> int:
        root = k
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[k] != root:
            self.parent[k], k = root, self.parent[k]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        lo, hi = (ra, rb) if ra < rb else (rb, ra)
        self.parent[hi] = lo
        return lo


class Mode(str, Enum):
    I_ONLY = "IOnly"
    I_AND_M = "IAndM"


@dataclass(frozen=True)
class ColorAssignment:
    mode: Mode
    color_of: Tuple[int, ...]  # name id -> color id
    colors: Dict[int, frozenset]

    def members(self, color: int) -> frozenset:
        return self.colors[color]

    def __len__(self) -> int:
        return len(self.colors)


def quotient(raw: NdaRaw, mode: Mode | str) -> ColorAssignment:
    mode = Mode(mode)
    uf = UnionFind(raw.num_names)
    edges: Iterable[Tuple[int, int]] = raw.I
    if mode is Mode.I_AND_M:
        edges = list(raw.I) + list(raw.M)
    for a, b in edges:
        uf.union(a, b)
    color_of_root: Dict[int, int] = {}
    color_of = []
    colors: Dict[int, set] = {}
    for n in range(raw.num_names):
        r = uf.find(n)
        if r not in color_of_root:
            color_of_root[r] = len(color_of_root)
        c = color_of_root[r]
        color_of.append(c)
        colors.setdefault(c, set()).add(n)
    return ColorAssignment(mode, tuple(color_of), {c: frozenset(s) for c, s in colors.items()})


def annotate(raw: NdaRaw, colors: ColorAssignment, label=None) -> Dict[Site, Tuple]:
    """Site -> tuple of color labels (default: the color ids)."""
    label = label or (lambda c: c)
    return {s: tuple(label(colors.color_of[n]) for n in raw.names[s]) for s in raw.sites}


def dump_json(raw: NdaRaw, io: ColorAssignment, full: ColorAssignment) -> dict:
    return {
        "module": raw.module.name,
        "sites": [
            {
                "site": str(s),
                "kind": s.kind,
                "var": raw.site_var(s),
                "names": list(raw.names[s]),
                "IOnly": [io.color_of[n] for n in raw.names[s]],
                "IAndM": [full.color_of[n] for n in raw.names[s]],
            }
            for s in raw.sites
        ],
        "M": [list(e) for e in raw.M],
        "I": [list(e) for e in raw.I],
        "colors": {
            "IOnly": {str(c): sorted(ns) for c, ns in io.colors.items()},
            "IAndM": {str(c): sorted(ns) for c, ns in full.colors.items()},
        },
    }
