import random

import pytest

from autoshard import programs
from autoshard.analysis import analyze_module
from autoshard.dimgraph import (
    ConflictEdge,
    DimGraph,
    compatibility_sets,
    compatible,
    conflicts_json,
    export_dot,
    group_arguments,
)
from autoshard.ir import parse_module
from autoshard.nda import Site, UnionFind, analyze, result_site, return_site
from randprog import random_module

S = Site("result", "t")


def box(extra=()):
    # c1 = (0,1) on the def side, c2 = (2,3) on the use side
    g = DimGraph((0, 1, 2, 3, 4), ((0, 2), (1, 3)) + tuple(extra))
    return g, ConflictEdge(0, 1, S), ConflictEdge(2, 3, S)


def test_pure_box_is_compatible():
    g, c1, c2 = box()
    assert compatible(c1, c2, g)
    assert compatible(c2, c1, g)


def test_direct_cross_edge_breaks_box():
    g, c1, c2 = box([(0, 3)])
    assert not compatible(c1, c2, g)


def test_cross_path_breaks_box():
    g, c1, c2 = box([(1, 4), (4, 2)])
    assert not compatible(c1, c2, g)


def test_compatible_is_reflexive():
    g, c1, _ = box()
    assert compatible(c1, c1, g)


def test_attn_conflicts():
    an = analyze_module(programs.attn())
    cs = an.graph.conflicts
    assert len(cs) == 5
    assert [str(c.site) for c in cs] == ["a", "b#0", "c", "d#0", "z#0"]
    assert len(an.sets) == 1 and len(an.sets[0].members) == 5
    assert len(an.groups) == 1


def test_attn_resolutions_are_disjoint_and_cover():
    an = analyze_module(programs.attn())
    cset = an.sets[0]
    c0, c1 = cset.chosen(0), cset.chosen(1)
    assert set(c0) == set(c1) == set(cset.members)
    for c in cset.members:
        assert {c0[c], c1[c]} == set(c.nodes)


def test_mlp_has_no_conflicts():
    an = analyze_module(programs.mlp())
    assert an.graph.conflicts == [] and an.sets == [] and an.groups == []


def test_transpose_matmul_single_conflict_on_result():
    an = analyze_module(parse_module(programs.TRANSPOSE_MATMUL))
    (c,) = an.graph.conflicts
    assert c.site == result_site("z")
    # the returned copy of the conflict is folded in as a mirror
    assert return_site("z") in c.sites and len(c.mirrors) == 1


def test_unrelated_conflicts_form_separate_sets():
    src = """\
def two(x: f32[8,4], u: f32[4,2]) {
  y = transpose[0,1](x)
  z = matmul(x, y)
  t = transpose[0,1](u)
  s = matmul(u, t)
  return z
}
"""
    an = analyze_module(parse_module(src))
    assert len(an.graph.conflicts) == 2
    assert len(compatibility_sets(an.graph)) == 2


def test_inconsistent_closure_is_split(caplog):
    # found by random search: the boxes among these four conflicts chain into
    # one closure class whose endpoint correspondences contradict
    edges = ((0, 7), (1, 5), (1, 6), (4, 0), (4, 3), (5, 1), (6, 2), (6, 4), (7, 5))
    g = DimGraph(tuple(range(8)), edges)
    g.conflicts = [ConflictEdge(2 * i, 2 * i + 1, S) for i in range(4)]
    uf = UnionFind(4)
    for i in range(4):
        for j in range(i + 1, 4):
            if compatible(g.conflicts[i], g.conflicts[j], g):
                uf.union(i, j)
    closure = {uf.find(i) for i in range(4)}
    with caplog.at_level("WARNING"):
        sets = compatibility_sets(g)
    assert len(sets) > len(closure)
    assert "disagree" in caplog.text
    assert sorted(c.nodes for s in sets for c in s.members) == [c.nodes for c in g.conflicts]
    for s in sets:
        for c in s.members:
            assert s.chosen(0)[c] != s.chosen(1)[c]


@pytest.mark.parametrize("layers", [2, 3, 4])
def test_stacked_layers_share_one_group(layers):
    an = analyze_module(programs.stacked_attn(layers))
    assert len(an.sets) == layers
    assert len(an.groups) == 1
    assert len(an.groups[0].sets) == layers


def test_group_signature_stable_under_renaming_and_reordering():
    base = programs.ATTN
    renamed = base.replace("k =", "kk =").replace("(k,", "(kk,")
    reordered = base.replace(
        "  k = matmul(x, wk)\n  v = matmul(x, wv)\n", "  v = matmul(x, wv)\n  k = matmul(x, wk)\n"
    )
    sigs = {analyze_module(parse_module(s)).groups[0].signature for s in (base, renamed, reordered)}
    assert len(sigs) == 1


def test_argument_grouping():
    m = programs.stacked_mlp(2)
    groups = set(group_arguments(m, analyze(m)).groups)
    assert ("l0_w1", "l1_w1") in groups and ("l0_w2", "l1_w2") in groups
    m = programs.mlp()
    assert group_arguments(m, analyze(m)).groups == (("x",), ("w1",), ("w2",))
    m = parse_module(programs.IDENTITY)
    assert group_arguments(m, analyze(m)).groups == (("x",),)


def test_dot_marks_conflicts_red():
    an = analyze_module(programs.attn())
    assert export_dot(an.graph).count("color=red") == 5
    an = analyze_module(programs.mlp())
    assert "color=red" not in export_dot(an.graph)


def test_conflicts_json_lists_two_resolutions():
    an = analyze_module(programs.attn())
    doc = conflicts_json(an.graph, an.sets, an.groups)
    assert len(doc["conflicts"]) == 5
    assert set(doc["groups"][0]["resolutions"]) == {"0", "1"}


@pytest.mark.parametrize("seed", range(40))
def test_linear_programs_have_no_conflicts(seed):
    m = random_module(seed, steps=random.Random(seed).randint(1, 8), linear=True)
    assert analyze_module(m).graph.conflicts == []


@pytest.mark.parametrize("seed", range(40))
def test_components_are_the_full_colors(seed):
    an = analyze_module(random_module(500 + seed))
    comps = {}
    for node, color in an.node_color.items():
        comps.setdefault(an.graph.component[node], set()).add(color)
    assert all(len(v) == 1 for v in comps.values())
    assert len(comps) == len(an.full.colors)
