"""Dimension graph, sharding conflicts and their compatibility structure.

Nodes of the dimension graph are the ``I``-only classes of dimension names;
directed edges are the def->use entries of ``M``.  Weakly-connected components
are exactly the ``I``+``M`` colors.  Two nodes of one component annotating the
same site are a *conflict*: sharding the color must pick one of them there.
"""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .ir import Module, op_family
from .nda import ColorAssignment, NdaRaw, Site, UnionFind, param_site

log = logging.getLogger(__name__)


class GroupingError(ValueError):
    """Isomorphism hashing merged sets whose resolutions do not correspond."""


@dataclass(frozen=True)
class ConflictEdge:
    a: int  # a < b
    b: int
    site: Site  # first site (program order) holding both nodes
    sites: Tuple[Site, ...] = ()
    # (image of a, image of b) at the return site when the conflict is returned
    mirrors: Tuple[Tuple[int, int], ...] = ()

    @property
    def nodes(self) -> Tuple[int, int]:
        return (self.a, self.b)

    def other(self, n: int) -> int:
        return self.b if n == self.a else self.a

    def unsharded(self, chosen: int) -> List[int]:
        """Nodes left unsharded when ``chosen`` wins, mirrors included."""
        loser = self.other(chosen)
        return [loser] + [mb if loser == self.b else ma for ma, mb in self.mirrors]


@dataclass
class DimGraph:
    nodes: Tuple[int, ...]
    edges: Tuple[Tuple[int, int], ...]
    conflicts: List[ConflictEdge] = field(default_factory=list)
    labels: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.succ: Dict[int, Tuple[int, ...]] = {}
        self.pred: Dict[int, Tuple[int, ...]] = {}
        s, p = defaultdict(list), defaultdict(list)
        for u, v in self.edges:
            s[u].append(v)
            p[v].append(u)
        self.succ = {n: tuple(sorted(s[n])) for n in self.nodes}
        self.pred = {n: tuple(sorted(p[n])) for n in self.nodes}
        uf = UnionFind(max(self.nodes, default=-1) + 1)
        for u, v in self.edges:
            uf.union(u, v)
        self.component = {n: uf.find(n) for n in self.nodes}
        self._edge_set = frozenset(self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return (u, v) in self._edge_set

    def reaches(self, src: int, dst: int, excluded: FrozenSet[Tuple[int, int]] = frozenset()) -> bool:
        """Directed path src ~> dst (length >= 1) avoiding ``excluded`` edges."""
        key = (src, dst, excluded)
        cache = self.__dict__.setdefault("_reach_cache", {})
        if key not in cache:
            cache[key] = _reaches(self, src, dst, excluded)
        return cache[key]


def _reaches(g: DimGraph, src: int, dst: int, excluded: FrozenSet[Tuple[int, int]]) -> bool:
    seen = {src}
    todo = deque([src])
    while todo:
        u = todo.popleft()
        for v in g.succ[u]:
            if (u, v) in excluded:
                continue
            if v == dst:
                return True
            if v not in seen:
                seen.add(v)
                todo.append(v)
    return False


def _node_labels(raw: NdaRaw, io: ColorAssignment) -> Dict[int, str]:
    """Structural label per node: op kind and dim position of a member.

    Result/param members win over operand-use members so that a node is named
    after the tensor it defines.
    """
    out: Dict[int, str] = {}
    rank: Dict[int, int] = {}
    priority = {"param": 0, "result": 1, "return": 2, "use": 3}
    for n in range(raw.num_names):
        node = io.color_of[n]
        site = raw.site_of[n]
        if site.kind in ("param", "return"):
            lab = f"{site.kind}:{raw.index_of[n]}"
        else:
            fam = op_family(raw.module.binding(site.var).op)
            where = "r" if site.kind == "result" else f"u{site.pos}"
            lab = f"{fam}:{where}:{raw.index_of[n]}"
        pr = priority[site.kind]
        if node not in out or pr < rank[node]:
            out[node], rank[node] = lab, pr
    return out


def build_dimension_graph(raw: NdaRaw, io: ColorAssignment) -> DimGraph:
    nodes = tuple(sorted(io.colors))
    edges = sorted(
        {(io.color_of[d], io.color_of[u]) for d, u in raw.M if io.color_of[d] != io.color_of[u]}
    )
    g = DimGraph(nodes, tuple(edges), labels=_node_labels(raw, io))
    g.conflicts = find_conflicts(g, raw, io)
    return g


def find_conflicts(g: DimGraph, raw: NdaRaw, io: Optional[ColorAssignment] = None) -> List[ConflictEdge]:
    """Pairs of same-component nodes annotating one site, deduplicated by node pair.

    The return site only repeats the returned variable's def-site conflicts
    through ``M``; such pairs are attached to that conflict as mirrors.
    """
    if io is None:
        from .nda import Mode, quotient

        io = quotient(raw, Mode.I_ONLY)
    found: Dict[Tuple[int, int], List[Site]] = {}
    mirrors: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}

    def pairs(site: Site):
        ns = [io.color_of[n] for n in raw.names[site]]
        for i in range(len(ns)):
            for j in range(i + 1, len(ns)):
                if ns[i] != ns[j] and g.component[ns[i]] == g.component[ns[j]]:
                    yield i, j, ns[i], ns[j]

    for site in raw.sites:
        if site.kind == "return":
            continue
        for _, _, a, b in pairs(site):
            key = (min(a, b), max(a, b))
            found.setdefault(key, [])
            if site not in found[key]:
                found[key].append(site)
    for site in raw.sites:
        if site.kind != "return":
            continue
        dnames = raw.names[raw.def_site(site.var)]
        for i, j, ra, rb in pairs(site):
            da, db = io.color_of[dnames[i]], io.color_of[dnames[j]]
            key = (min(da, db), max(da, db))
            if key not in found:
                found[(min(ra, rb), max(ra, rb))] = [site]
                continue
            found[key].append(site)
            mirrors.setdefault(key, []).append((ra, rb) if da == key[0] else (rb, ra))
    return [
        ConflictEdge(a, b, sites[0], tuple(sites), tuple(mirrors.get((a, b), ())))
        for (a, b), sites in found.items()
    ]


def box_match(c1: ConflictEdge, c2: ConflictEdge, g: DimGraph) -> Optional[Dict[int, int]]:
    """Endpoint correspondence if c1 (def side) and c2 (use side) form a box.

    Returns ``{N: L, O: R}`` for edges N->L, O->R with no directed path N~>R or
    O~>L outside the two box edges, else None.
    """
    for n, o in ((c1.a, c1.b), (c1.b, c1.a)):
        l, r = c2.a, c2.b
        if not (g.has_edge(n, l) and g.has_edge(o, r)):
            continue
        box = frozenset({(n, l), (o, r)})
        if g.reaches(n, r, box) or g.reaches(o, l, box):
            continue
        return {n: l, o: r}
    return None


def compatible(c1: ConflictEdge, c2: ConflictEdge, g: DimGraph) -> bool:
    if c1.nodes == c2.nodes:
        return True
    return _correspondence(c1, c2, g) is not None


def _correspondence(c1: ConflictEdge, c2: ConflictEdge, g: DimGraph) -> Optional[Dict[int, int]]:
    """Endpoint map c1 -> c2 from a box in either direction."""
    m = box_match(c1, c2, g)
    if m is not None:
        return m
    m = box_match(c2, c1, g)
    if m is not None:
        return {v: k for k, v in m.items()}
    return None


@dataclass(frozen=True)
class CompatSet:
    members: Tuple[ConflictEdge, ...]
    # endpoint sharded under resolution bit 0, per member; bit 1 picks the other
    choice0: Tuple[int, ...]

    def chosen(self, bit: int) -> Dict[ConflictEdge, int]:
        if bit == 0:
            return dict(zip(self.members, self.choice0))
        return {c: c.other(n) for c, n in zip(self.members, self.choice0)}

    def losers(self, bit: int) -> List[int]:
        return [x for c, n in self.chosen(bit).items() for x in c.unsharded(n)]

    @property
    def nodes(self) -> FrozenSet[int]:
        return frozenset(n for c in self.members for n in c.nodes)


def compatibility_sets(g: DimGraph) -> List[CompatSet]:
    """Closure classes of pairwise compatibility, each with a consistent choice.

    Member parity 0 means "endpoint ``a`` is sharded".  If the box
    correspondences inside a closure class contradict each other the class is
    split greedily: a breadth-first sweep from its first conflict keeps every
    conflict whose parity agrees with all already-placed neighbours, and the
    leftovers form further sets the same way (with a warning).
    """
    cs = g.conflicts
    adj: List[List[Tuple[int, int]]] = [[] for _ in cs]
    uf = UnionFind(len(cs))
    for i in range(len(cs)):
        for j in range(i + 1, len(cs)):
            ci, cj = cs[i], cs[j]
            if g.component[ci.a] != g.component[cj.a]:
                continue
            m = _correspondence(ci, cj, g)
            if m is None:
                continue
            rel = 0 if m[ci.a] == cj.a else 1
            adj[i].append((j, rel))
            adj[j].append((i, rel))
            uf.union(i, j)
    classes: Dict[int, List[int]] = {}
    for i in range(len(cs)):
        classes.setdefault(uf.find(i), []).append(i)
    out = []
    for root in sorted(classes):
        remaining = classes[root]
        while remaining:
            parity = {remaining[0]: 0}
            pool = set(remaining)
            queue = deque([remaining[0]])
            while queue:
                i = queue.popleft()
                for j, rel in sorted(adj[i]):
                    if j not in pool or j in parity:
                        continue
                    pj = parity[i] ^ rel
                    if all(parity[k] ^ pj == r for k, r in adj[j] if k in parity):
                        parity[j] = pj
                        queue.append(j)
            idxs = sorted(parity)
            out.append(CompatSet(tuple(cs[i] for i in idxs), tuple(cs[i].a if parity[i] == 0 else cs[i].b for i in idxs)))
            remaining = [k for k in remaining if k not in parity]
            if remaining:
                log.warning(
                    "compatible conflicts disagree on endpoints; split %d conflict(s) at %s off a set of %d",
                    len(remaining), ", ".join(str(cs[k].site) for k in remaining), len(idxs),
                )
    return out


# --- cross-layer grouping -------------------------------------------------


def _h(*parts) -> str:
    return hashlib.sha1(repr(parts).encode()).hexdigest()[:16]


def wl_labels(cset: CompatSet, g: DimGraph, rounds: int = 3) -> Dict[int, str]:
    """Weisfeiler-Lehman refinement on the subgraph induced by the set's nodes."""
    nodes = sorted(cset.nodes)
    nodeset = set(nodes)
    incid = defaultdict(list)
    for c in cset.members:
        incid[c.a].append(c.b)
        incid[c.b].append(c.a)
    lab = {n: _h(g.labels.get(n, ""), len(incid[n])) for n in nodes}
    for _ in range(rounds):
        lab = {
            n: _h(
                lab[n],
                sorted(lab[v] for v in g.succ[n] if v in nodeset),
                sorted(lab[u] for u in g.pred[n] if u in nodeset),
                sorted(lab[v] for v in incid[n]),
            )
            for n in nodes
        }
    return lab


def set_signature(cset: CompatSet, g: DimGraph) -> str:
    lab = wl_labels(cset, g)
    nodeset = set(lab)
    edges = sorted((lab[u], lab[v]) for u, v in g.edges if u in nodeset and v in nodeset)
    conf = sorted(tuple(sorted((lab[c.a], lab[c.b]))) for c in cset.members)
    return _h(sorted(lab.values()), edges, conf)


def _orient(cset: CompatSet, lab: Dict[int, str]) -> CompatSet:
    """Flip bits so that bit 0 shards the lower-labelled end of the canonical conflict."""
    keyed = [
        (tuple(sorted((lab[c.a], lab[c.b]))), i) for i, c in enumerate(cset.members)
    ]
    _, k = min(keyed)
    c = cset.members[k]
    want = min((lab[c.a], c.a), (lab[c.b], c.b))[1]
    if cset.choice0[k] == want:
        return cset
    flipped = tuple(m.other(n) for m, n in zip(cset.members, cset.choice0))
    return replace(cset, choice0=flipped)


@dataclass(frozen=True)
class SetGroup:
    id: int
    sets: Tuple[CompatSet, ...]
    signature: str

    @property
    def conflicts(self) -> List[ConflictEdge]:
        return [c for s in self.sets for c in s.members]

    @property
    def nodes(self) -> FrozenSet[int]:
        return frozenset(n for s in self.sets for n in s.nodes)

    def losers(self, bit: int) -> List[int]:
        return [n for s in self.sets for n in s.losers(bit)]

    def chosen(self, bit: int) -> Dict[ConflictEdge, int]:
        out = {}
        for s in self.sets:
            out.update(s.chosen(bit))
        return out


def group_isomorphic_sets(sets: Sequence[CompatSet], g: DimGraph) -> List[SetGroup]:
    buckets: Dict[str, List[CompatSet]] = {}
    for s in sets:
        lab = wl_labels(s, g)
        sig = set_signature(s, g)
        buckets.setdefault(sig, []).append(_orient(s, lab))
    groups = []
    for sig, members in buckets.items():
        ref = None
        for s in members:
            lab = wl_labels(s, g)
            chosen = sorted(lab[n] for n in s.choice0)
            if ref is None:
                ref = chosen
            elif chosen != ref:
                raise GroupingError(
                    f"compatibility sets hashed alike but resolutions do not transfer "
                    f"(conflict at {s.members[0].site})"
                )
        groups.append(SetGroup(len(groups), tuple(members), sig))
    return groups


# --- argument grouping ----------------------------------------------------


def _use_role(op, pos: int, idx: int) -> str:
    fam = op_family(op)
    if fam == "matmul":
        return "contract" if (pos, idx) in ((0, 1), (1, 0)) else "map"
    if fam == "reduce":
        return "reduced" if idx == op.r else "map"
    if fam == "transpose":
        return "swap" if idx in (op.l, op.r) and op.l != op.r else "map"
    return "map"


@dataclass(frozen=True)
class ArgGroups:
    groups: Tuple[Tuple[str, ...], ...]
    key: Dict[str, Tuple]

    def group_of(self, param: str) -> Tuple[str, ...]:
        for grp in self.groups:
            if param in grp:
                return grp
        raise KeyError(param)


def param_signature(m: Module, raw: NdaRaw, param: str) -> Tuple:
    """Per dim: (extent, sorted first-hop use keys)."""
    names = raw.names[param_site(param)]
    uses = defaultdict(list)
    for d, u in raw.M:
        uses[d].append(u)
    sig = []
    for i, n in enumerate(names):
        keys = []
        for u in uses[n]:
            site = raw.site_of[u]
            j = raw.index_of[u]
            if site.kind == "return":
                keys.append(("return", 0, j, "map"))
            else:
                op = m.binding(site.var).op
                keys.append((op_family(op), site.pos, j, _use_role(op, site.pos, j)))
        sig.append((raw.extent(n), tuple(sorted(keys))))
    return tuple(sig)


def group_arguments(m: Module, raw: NdaRaw) -> ArgGroups:
    key = {p: param_signature(m, raw, p) for p, _ in m.params}
    buckets: Dict[Tuple, List[str]] = {}
    for p, _ in m.params:
        buckets.setdefault(key[p], []).append(p)
    return ArgGroups(tuple(tuple(v) for v in buckets.values()), key)


# --- rendering ------------------------------------------------------------


def export_dot(g: DimGraph, name: str = "dims") -> str:
    lines = [f"digraph {name} {{"]
    for n in g.nodes:
        lines.append(f'  n{n} [label="{n}\\n{g.labels.get(n, "")}"];')
    for u, v in g.edges:
        lines.append(f"  n{u} -> n{v};")
    for c in g.conflicts:
        lines.append(f'  n{c.a} -> n{c.b} [dir=none, color=red, label="{c.site}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def conflicts_json(g: DimGraph, sets: Sequence[CompatSet], groups: Sequence[SetGroup]) -> dict:
    index = {c.nodes: i for i, c in enumerate(g.conflicts)}
    return {
        "conflicts": [
            {"nodes": [c.a, c.b], "site": str(c.site), "sites": [str(s) for s in c.sites]}
            for c in g.conflicts
        ],
        "sets": [[index[c.nodes] for c in s.members] for s in sets],
        "groups": [
            {
                "id": grp.id,
                "signature": grp.signature,
                "sets": [[index[c.nodes] for c in s.members] for s in grp.sets],
                "resolutions": {
                    str(bit): [[index[c.nodes], n] for c, n in grp.chosen(bit).items()]
                    for bit in (0, 1)
                },
            }
            for grp in groups
        ],
    }
