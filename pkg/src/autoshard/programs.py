"""Small reference programs used by the tests, the CLI and the README."""

from __future__ import annotations

from .ir import Module, parse_module

MLP = """\
# two linear layers
def mlp(x: f32[256,32], w1: f32[32,64], w2: f32[64,16]) {
  y = matmul(x, w1)
  z = relu(y)
  w = matmul(z, w2)
  return w
}
"""

# softmax mocked up as averaging: reduce + broadcast + div
ATTN = """\
def attn(x: f32[8,4], wq: f32[4,4], wk: f32[4,4], wv: f32[4,4]) {
  k = matmul(x, wk)
  v = matmul(x, wv)
  q = matmul(x, wq)
  qt = transpose[0,1](q)
  a = matmul(k, qt)
  b = reduce[0, add](a)
  c = broadcast[0, 8](b)
  d = div(a, c)
  z = matmul(d, v)
  return z
}
"""

TRANSPOSE_MATMUL = """\
def f(x: f32[8,4]) {
  y = transpose[0,1](x)
  z = matmul(x, y)
  return z
}
"""

IDENTITY = """\
def id(x: f32[4]) {
  return x
}
"""


def _attn_layer(i: int, src: str, seq: int) -> list[str]:
    p = f"l{i}_"
    return [
        f"  {p}k = matmul({src}, {p}wk)",
        f"  {p}v = matmul({src}, {p}wv)",
        f"  {p}q = matmul({src}, {p}wq)",
        f"  {p}qt = transpose[0,1]({p}q)",
        f"  {p}a = matmul({p}k, {p}qt)",
        f"  {p}b = reduce[0, add]({p}a)",
        f"  {p}c = broadcast[0, {seq}]({p}b)",
        f"  {p}d = div({p}a, {p}c)",
        f"  {p}z = matmul({p}d, {p}v)",
    ]


def stacked_attn_source(layers: int, seq: int = 8, dim: int = 4) -> str:
    """``layers`` attention blocks, each feeding the next."""
    params = ["x: f32[%d,%d]" % (seq, dim)]
    body = []
    src = "x"
    for i in range(layers):
        params += [f"l{i}_{w}: f32[{dim},{dim}]" for w in ("wq", "wk", "wv")]
        body += _attn_layer(i, src, seq)
        src = f"l{i}_z"
    return (
        f"def attn{layers}({', '.join(params)}) {{\n"
        + "\n".join(body)
        + f"\n  return {src}\n}}\n"
    )


def stacked_mlp_source(layers: int, batch: int = 16, dim: int = 8, hidden: int = 32) -> str:
    params = [f"x: f32[{batch},{dim}]"]
    body = []
    src = "x"
    for i in range(layers):
        params += [f"l{i}_w1: f32[{dim},{hidden}]", f"l{i}_w2: f32[{hidden},{dim}]"]
        body += [
            f"  l{i}_y = matmul({src}, l{i}_w1)",
            f"  l{i}_h = relu(l{i}_y)",
            f"  l{i}_o = matmul(l{i}_h, l{i}_w2)",
        ]
        src = f"l{i}_o"
    return (
        f"def mlp{layers}({', '.join(params)}) {{\n"
        + "\n".join(body)
        + f"\n  return {src}\n}}\n"
    )


def mlp() -> Module:
    return parse_module(MLP)


def attn() -> Module:
    return parse_module(ATTN)


def stacked_attn(layers: int, seq: int = 8, dim: int = 4) -> Module:
    return parse_module(stacked_attn_source(layers, seq, dim))


def stacked_mlp(layers: int, **kw) -> Module:
    return parse_module(stacked_mlp_source(layers, **kw))
