"""Straight-line tensor IR in A-normal form.

A module is a list of typed parameters, a sequence of single-op bindings and a
returned variable.  The textual form looks like::

    def mlp(x: f32[256,32], w1: f32[32,64], w2: f32[64,16]) {
      y = matmul(x, w1)
      z = relu(y)
      w = matmul(z, w2)
      return w
    }

Binding result shapes are inferred; an explicit ``y: f32[256,64] = ...``
annotation is accepted and checked.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE_BYTES = {"f16": 2, "bf16": 2, "f32": 4, "f64": 8}
BYTES_DTYPE = {2: "f16", 4: "f32", 8: "f64"}

BINARY_OPS = ("add", "mul", "sub", "div")
UNARY_OPS = ("relu", "neg", "exp", "recip")
COMBINERS = ("add", "mul", "max")


class IRError(ValueError):
    """Base class for malformed programs."""


class ParseError(IRError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {msg}")
        self.line = line
        self.col = col


class ShapeError(IRError):
    pass


@dataclass(frozen=True)
class Shape:
    dims: Tuple[int, ...]
    elem_bytes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d < 1 for d in self.dims):
            raise ShapeError(f"non-positive extent in {self.dims}")
        if self.elem_bytes < 1:
            raise ShapeError("elem_bytes must be positive")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def nbytes(self) -> int:
        return self.elem_bytes * math.prod(self.dims)

    def with_dims(self, dims: Sequence[int]) -> "Shape":
        return Shape(tuple(dims), self.elem_bytes)


# --- op kinds -----------------------------------------------------------


@dataclass(frozen=True)
class Matmul:
    name = "matmul"
    arity = 2


@dataclass(frozen=True)
class Transpose:
    l: int
    r: int
    name = "transpose"
    arity = 1


@dataclass(frozen=True)
class Reduce:
    r: int
    combiner: str = "add"
    name = "reduce"
    arity = 1


@dataclass(frozen=True)
class Broadcast:
    l: int
    extent: int
    name = "broadcast"
    arity = 1


@dataclass(frozen=True)
class ElementwiseBinary:
    op: str
    arity = 2

    @property
    def name(self) -> str:
        return self.op


@dataclass(frozen=True)
class ElementwiseUnary:
    op: str
    arity = 1

    @property
    def name(self) -> str:
        return self.op


OpKind = Union[Matmul, Transpose, Reduce, Broadcast, ElementwiseBinary, ElementwiseUnary]


def op_family(op: OpKind) -> str:
    """Coarse op category: matmul, transpose, reduce, broadcast, binary, unary."""
    if isinstance(op, ElementwiseBinary):
        return "binary"
    if isinstance(op, ElementwiseUnary):
        return "unary"
    return op.name


def format_op(op: OpKind) -> str:
    if isinstance(op, Transpose):
        return f"transpose[{op.l},{op.r}]"
    if isinstance(op, Reduce):
        return f"reduce[{op.r}, {op.combiner}]"
    if isinstance(op, Broadcast):
        return f"broadcast[{op.l}, {op.extent}]"
    return op.name


@dataclass(frozen=True)
class Binding:
    var: str
    op: OpKind
    operands: Tuple[str, ...]
    result_shape: Shape


@dataclass(frozen=True)
class Module:
    name: str
    params: Tuple[Tuple[str, Shape], ...]
    bindings: Tuple[Binding, ...]
    result: str

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "bindings", tuple(self.bindings))

    @property
    def elem_bytes(self) -> int:
        if self.params:
            return self.params[0][1].elem_bytes
        return 4

    def shapes(self) -> Dict[str, Shape]:
        env = dict(self.params)
        for b in self.bindings:
            env[b.var] = b.result_shape
        return env

    def binding(self, var: str) -> Binding:
        for b in self.bindings:
            if b.var == var:
                return b
        raise KeyError(var)

    def uses(self) -> Dict[str, List[Tuple[str, int]]]:
        """var -> [(consumer var or '<return>', operand position)]"""
        out: Dict[str, List[Tuple[str, int]]] = {p: [] for p, _ in self.params}
        for b in self.bindings:
            out.setdefault(b.var, [])
            for pos, v in enumerate(b.operands):
                out[v].append((b.var, pos))
        out[self.result].append(("<return>", 0))
        return out


@dataclass(frozen=True)
class Mesh:
    axes: Tuple[Tuple[str, int], ...]

    def __post_init__(self):
        axes = tuple((str(a), int(n)) for a, n in self.axes)
        names = [a for a, _ in axes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate mesh axis in {names}")
        for a, n in axes:
            if n < 2:
                raise ValueError(f"mesh axis {a} must have size >= 2, got {n}")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def parse(cls, text: str) -> "Mesh":
        """Parse ``b=2,m=4``."""
        axes = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            name, _, size = part.partition("=")
            if not size:
                raise ValueError(f"bad mesh entry {part!r}, expected name=size")
            axes.append((name.strip(), int(size)))
        return cls(tuple(axes))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(a for a, _ in self.axes)

    def size(self, axis: str) -> int:
        for a, n in self.axes:
            if a == axis:
                return n
        raise KeyError(axis)

    def group_size(self, axes: Sequence[str]) -> int:
        return math.prod(self.size(a) for a in axes)

    @property
    def num_devices(self) -> int:
        return math.prod(n for _, n in self.axes)

    def __str__(self) -> str:
        return ",".join(f"{a}={n}" for a, n in self.axes)


@dataclass(frozen=True)
class MachineSpec:
    flops_per_sec: float
    bytes_per_sec: Mapping[str, float]
    device_memory_bytes: float
    # only read when the elementwise roofline option is switched on
    hbm_bytes_per_sec: Optional[float] = None

    def __post_init__(self):
        if self.flops_per_sec <= 0 or self.device_memory_bytes <= 0:
            raise ValueError("machine rates must be positive")
        if any(bw <= 0 for bw in self.bytes_per_sec.values()):
            raise ValueError("link bandwidths must be positive")

    @classmethod
    def default(cls, mesh: Mesh) -> "MachineSpec":
        return cls(1e12, {a: 1e11 for a in mesh.names}, 16 * 2**30)

    @classmethod
    def from_json(cls, doc: Mapping) -> "MachineSpec":
        return cls(
            flops_per_sec=float(doc["flops_per_sec"]),
            bytes_per_sec={k: float(v) for k, v in doc["bandwidth"].items()},
            device_memory_bytes=float(doc["device_memory_bytes"]),
            hbm_bytes_per_sec=doc.get("hbm_bytes_per_sec"),
        )

    def to_json(self) -> dict:
        doc = {
            "flops_per_sec": self.flops_per_sec,
            "bandwidth": dict(self.bytes_per_sec),
            "device_memory_bytes": self.device_memory_bytes,
        }
        if self.hbm_bytes_per_sec is not None:
            doc["hbm_bytes_per_sec"] = self.hbm_bytes_per_sec
        return doc


# --- shape inference ----------------------------------------------------


def infer_shape(op: OpKind, args: Sequence[Shape], where: str = "") -> Shape:
    """Result shape of ``op`` applied to operands of the given shapes."""
    ctx = f" in binding {where!r}" if where else ""
    if len(args) != op.arity:
        raise ShapeError(f"{op.name} expects {op.arity} operands, got {len(args)}{ctx}")
    eb = args[0].elem_bytes
    if any(a.elem_bytes != eb for a in args):
        raise ShapeError(f"mixed element widths{ctx}")
    if isinstance(op, Matmul):
        x, y = args
        if x.rank != 2 or y.rank != 2:
            raise ShapeError(f"matmul operands must be rank 2{ctx}")
        if x.dims[1] != y.dims[0]:
            raise ShapeError(
                f"matmul contraction mismatch {list(x.dims)} x {list(y.dims)}{ctx}"
            )
        return Shape((x.dims[0], y.dims[1]), eb)
    if isinstance(op, Transpose):
        (x,) = args
        if not (0 <= op.l < x.rank and 0 <= op.r < x.rank):
            raise ShapeError(f"transpose dims out of range for rank {x.rank}{ctx}")
        dims = list(x.dims)
        dims[op.l], dims[op.r] = dims[op.r], dims[op.l]
        return Shape(tuple(dims), eb)
    if isinstance(op, Reduce):
        (x,) = args
        if not 0 <= op.r < x.rank:
            raise ShapeError(f"reduce dim {op.r} out of range for rank {x.rank}{ctx}")
        if op.combiner not in COMBINERS:
            raise ShapeError(f"unknown combiner {op.combiner}{ctx}")
        return Shape(x.dims[: op.r] + x.dims[op.r + 1 :], eb)
    if isinstance(op, Broadcast):
        (x,) = args
        if not 0 <= op.l <= x.rank:
            raise ShapeError(f"broadcast position {op.l} out of range{ctx}")
        if op.extent < 1:
            raise ShapeError(f"broadcast extent must be positive{ctx}")
        return Shape(x.dims[: op.l] + (op.extent,) + x.dims[op.l :], eb)
    if isinstance(op, ElementwiseBinary):
        x, y = args
        if x.dims != y.dims:
            raise ShapeError(
                f"{op.op} operands differ: {list(x.dims)} vs {list(y.dims)}{ctx}"
            )
        return x
    if isinstance(op, ElementwiseUnary):
        return args[0]
    raise ShapeError(f"unknown op {op!r}")


def check_module(m: Module) -> None:
    """Raise if ``m`` violates SSA/ANF or shape rules."""
    env: Dict[str, Shape] = {}
    for p, s in m.params:
        if p in env:
            raise IRError(f"duplicate parameter {p!r}")
        env[p] = s
    widths = {s.elem_bytes for _, s in m.params}
    if len(widths) > 1:
        raise ShapeError("parameters use more than one element width")
    for b in m.bindings:
        if b.var in env:
            raise IRError(f"duplicate binding {b.var!r}")
        for v in b.operands:
            if v not in env:
                raise IRError(f"use of undefined variable {v!r} in binding {b.var!r}")
        shape = infer_shape(b.op, [env[v] for v in b.operands], b.var)
        if shape != b.result_shape:
            raise ShapeError(
                f"binding {b.var!r} declared {list(b.result_shape.dims)}, "
                f"inferred {list(shape.dims)}"
            )
        env[b.var] = shape
    if m.result not in env:
        raise IRError(f"returned variable {m.result!r} is undefined")


def build_module(
    name: str,
    params: Sequence[Tuple[str, Sequence[int]]],
    body: Sequence[Tuple[str, OpKind, Sequence[str]]],
    result: str,
    elem_bytes: int = 4,
) -> Module:
    """Programmatic constructor; shapes of bindings are inferred."""
    env = {p: Shape(tuple(d), elem_bytes) for p, d in params}
    bindings = []
    for var, op, operands in body:
        for v in operands:
            if v not in env:
                raise IRError(f"use of undefined variable {v!r} in binding {var!r}")
        if var in env:
            raise IRError(f"duplicate binding {var!r}")
        shape = infer_shape(op, [env[v] for v in operands], var)
        env[var] = shape
        bindings.append(Binding(var, op, tuple(operands), shape))
    m = Module(name, tuple((p, env[p]) for p, _ in params), tuple(bindings), result)
    check_module(m)
    return m


# --- parsing ------------------------------------------------------------

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>#[^\n]*)"
    r"|(?P<int>\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_.]*)"
    r"|(?P<punct>[()\[\]{},:=])"
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _lex(text: str) -> List[_Tok]:
    toks = []
    line, col, pos = 1, 1, 0
    while pos < len(text):
        mt = _TOKEN.match(text, pos)
        if mt is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = mt.lastgroup
        s = mt.group()
        if kind == "nl":
            line, col = line + 1, 1
        else:
            if kind not in ("ws", "comment"):
                toks.append(_Tok(kind, s, line, col))
            col += len(s)
        pos = mt.end()
    toks.append(_Tok("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _lex(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: Optional[_Tok] = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(msg, tok.line, tok.col)

    def expect(self, kind: str, text: Optional[str] = None) -> _Tok:
        tok = self.tok
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            got = tok.text or tok.kind
            raise self.error(f"expected {want!r}, got {got!r}")
        self.i += 1
        return tok

    def accept(self, text: str) -> bool:
        if self.tok.kind == "punct" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def int_(self) -> int:
        return int(self.expect("int").text)

    def shape(self) -> Shape:
        tok = self.expect("ident")
        if tok.text not in DTYPE_BYTES:
            raise self.error(f"unknown element type {tok.text!r}", tok)
        self.expect("punct", "[")
        dims = []
        if not self.accept("]"):
            while True:
                d = self.int_()
                if d < 1:
                    raise self.error("extents must be positive")
                dims.append(d)
                if self.accept("]"):
                    break
                self.expect("punct", ",")
        return Shape(tuple(dims), DTYPE_BYTES[tok.text])

    def op(self) -> Tuple[OpKind, _Tok]:
        tok = self.expect("ident")
        name = tok.text
        if name == "matmul":
            return Matmul(), tok
        if name in BINARY_OPS:
            return ElementwiseBinary(name), tok
        if name in UNARY_OPS:
            return ElementwiseUnary(name), tok
        if name == "transpose":
            self.expect("punct", "[")
            l = self.int_()
            self.expect("punct", ",")
            r = self.int_()
            self.expect("punct", "]")
            return Transpose(l, r), tok
        if name == "reduce":
            self.expect("punct", "[")
            r = self.int_()
            self.expect("punct", ",")
            comb = self.expect("ident")
            if comb.text not in COMBINERS:
                raise self.error(f"unknown combiner {comb.text!r}", comb)
            self.expect("punct", "]")
            return Reduce(r, comb.text), tok
        if name == "broadcast":
            self.expect("punct", "[")
            l = self.int_()
            self.expect("punct", ",")
            ext = self.int_()
            self.expect("punct", "]")
            return Broadcast(l, ext), tok
        raise self.error(f"unknown op {name!r}", tok)

    def module(self) -> Module:
        self.expect("ident", "def")
        name = self.expect("ident").text
        self.expect("punct", "(")
        env: Dict[str, Shape] = {}
        params = []
        if not self.accept(")"):
            while True:
                ptok = self.expect("ident")
                self.expect("punct", ":")
                s = self.shape()
                if ptok.text in env:
                    raise self.error(f"duplicate parameter {ptok.text!r}", ptok)
                env[ptok.text] = s
                params.append((ptok.text, s))
                if self.accept(")"):
                    break
                self.expect("punct", ",")
        if len({s.elem_bytes for _, s in params}) > 1:
            raise self.error("parameters use more than one element width")
        self.expect("punct", "{")
        bindings = []
        while not (self.tok.kind == "ident" and self.tok.text == "return"):
            vtok = self.expect("ident")
            declared = None
            if self.accept(":"):
                declared = self.shape()
            self.expect("punct", "=")
            op, optok = self.op()
            self.expect("punct", "(")
            operands = []
            if not self.accept(")"):
                while True:
                    atok = self.expect("ident")
                    if atok.text not in env:
                        raise self.error(
                            f"use of undefined variable {atok.text!r} in binding "
                            f"{vtok.text!r}",
                            atok,
                        )
                    operands.append(atok.text)
                    if self.accept(")"):
                        break
                    self.expect("punct", ",")
            if vtok.text in env:
                raise self.error(f"duplicate binding {vtok.text!r}", vtok)
            try:
                shape = infer_shape(op, [env[v] for v in operands], vtok.text)
            except ShapeError as e:
                raise ShapeError(f"{optok.line}:{optok.col}: {e}") from None
            if declared is not None and declared != shape:
                raise ShapeError(
                    f"{vtok.line}:{vtok.col}: binding {vtok.text!r} declared "
                    f"{list(declared.dims)}, inferred {list(shape.dims)}"
                )
            env[vtok.text] = shape
            bindings.append(Binding(vtok.text, op, tuple(operands), shape))
        self.expect("ident", "return")
        rtok = self.expect("ident")
        if rtok.text not in env:
            raise self.error(f"returned variable {rtok.text!r} is undefined", rtok)
        self.expect("punct", "}")
        self.expect("eof")
        return Module(name, tuple(params), tuple(bindings), rtok.text)


def parse_module(text: str) -> Module:
    return _Parser(text).module()


def format_shape(shape: Shape, axes: Optional[Sequence[Sequence[str]]] = None) -> str:
    parts = []
    for i, d in enumerate(shape.dims):
        a = axes[i] if axes is not None else ()
        parts.append(f"{d}{{{','.join(a)}}}" if a else str(d))
    return f"{BYTES_DTYPE.get(shape.elem_bytes, 'f32')}[{','.join(parts)}]"


def print_module(m: Module, annotate: bool = False) -> str:
    """Render ``m`` in the textual grammar.

    With ``annotate`` every binding carries its (inferred) result shape.
    """
    params = ", ".join(f"{p}: {format_shape(s)}" for p, s in m.params)
    lines = [f"def {m.name}({params}) {{"]
    for b in m.bindings:
        lhs = f"{b.var}: {format_shape(b.result_shape)}" if annotate else b.var
        lines.append(f"  {lhs} = {format_op(b.op)}({', '.join(b.operands)})")
    lines.append(f"  return {m.result}")
    lines.append("}")
    return "\n".join(lines) + "\n"


# --- dense semantics ----------------------------------------------------


def eval_op(op: OpKind, args: Sequence[np.ndarray], extent: Optional[int] = None) -> np.ndarray:
    """Evaluate one op densely.  ``extent`` overrides a broadcast's extent."""
    if isinstance(op, Matmul):
        return np.matmul(args[0], args[1])
    if isinstance(op, Transpose):
        return np.swapaxes(args[0], op.l, op.r)
    if isinstance(op, Reduce):
        return combine_reduce(args[0], op.combiner, op.r)
    if isinstance(op, Broadcast):
        n = op.extent if extent is None else extent
        return np.repeat(np.expand_dims(args[0], op.l), n, axis=op.l)
    if isinstance(op, ElementwiseBinary):
        x, y = args
        if op.op == "add":
            return x + y
        if op.op == "mul":
            return x * y
        if op.op == "sub":
            return x - y
        return x / y
    if isinstance(op, ElementwiseUnary):
        (x,) = args
        if op.op == "relu":
            return np.maximum(x, 0)
        if op.op == "neg":
            return -x
        if op.op == "exp":
            return np.exp(x)
        return 1 / x
    raise TypeError(f"unknown op {op!r}")


def combine_reduce(x: np.ndarray, combiner: str, axis: int) -> np.ndarray:
    if combiner == "add":
        return np.sum(x, axis=axis)
    if combiner == "mul":
        return np.prod(x, axis=axis)
    if combiner == "max":
        return np.max(x, axis=axis)
    raise ValueError(f"unknown combiner {combiner}")


def combine_stack(parts: Sequence[np.ndarray], combiner: str) -> np.ndarray:
    """Fold equally-shaped arrays with ``combiner`` (left to right)."""
    return combine_reduce(np.stack(parts), combiner, 0)


def interpret(m: Module, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    env: Dict[str, np.ndarray] = {}
    for p, s in m.params:
        if p not in inputs:
            raise IRError(f"missing input {p!r}")
        v = np.asarray(inputs[p])
        if v.shape != s.dims:
            raise IRError(f"input {p!r} has shape {v.shape}, expected {s.dims}")
        env[p] = v
    for b in m.bindings:
        out = eval_op(b.op, [env[v] for v in b.operands])
        if out.shape != b.result_shape.dims:
            raise ShapeError(f"binding {b.var!r} produced shape {out.shape}")
        env[b.var] = out
    return env[m.result]
