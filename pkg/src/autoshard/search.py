"""Monte Carlo tree search over sharding actions.

A state is a :class:`ShardingState`; an action shards one argument-mirrored
unit of colors over one mesh axis, fixing the resolution bits of every
conflict group the unit touches.  States reached by different action orders
share one tree node (the tree is a DAG keyed by :func:`state_key`).
"""

from __future__ import annotations

import itertools
import math
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .analysis import Analysis, analyze_module
from .cost import DEFAULT_PENALTY, CostOptions, CostReport, Score, estimate, score
from .ir import MachineSpec, Mesh, Module
from .lowering import EMPTY_STATE, ShardingState, apply, check_state


@dataclass(frozen=True, order=True)
class Action:
    """``Shard(unit, bits, axis)``; ``unit < 0`` is Stop."""

    unit: int
    bits: Tuple[Tuple[int, int], ...] = ()
    axis: str = ""
    axis_index: int = 0

    @property
    def is_stop(self) -> bool:
        return self.unit < 0

    @property
    def bits_int(self) -> int:
        return sum(b << i for i, (_, b) in enumerate(self.bits))

    def sort_key(self) -> Tuple:
        return (self.is_stop, self.unit, self.bits_int, self.axis_index)

    def to_json(self):
        if self.is_stop:
            return "stop"
        return {"unit": self.unit, "resolutions": {str(g): b for g, b in self.bits}, "axis": self.axis}

    def __str__(self) -> str:
        if self.is_stop:
            return "Stop"
        bits = ",".join(f"{g}:{b}" for g, b in self.bits)
        return f"Shard({self.unit}, {{{bits}}}, {self.axis})"


STOP = Action(-1)


@dataclass(frozen=True)
class SearchConfig:
    budget: int = 500
    max_depth: int = 30
    min_unique_dims: int = 10
    exploration: float = math.sqrt(2)
    seed: int = 0
    workers: int = 1
    penalty_constant: float = DEFAULT_PENALTY
    early_stop_rounds: int = 2
    rounds: int = 8
    cost_options: CostOptions = CostOptions()

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.workers < 1 or self.rounds < 1 or self.early_stop_rounds < 1:
            raise ValueError("workers, rounds and early_stop_rounds must be >= 1")


@dataclass
class SearchResult:
    best_state: ShardingState
    best_score: Score
    best_report: CostReport
    rounds: List[float]
    actions_taken: List[Action]
    visited_states: int
    evaluated_states: int
    simulations: int

    def trace_json(self) -> dict:
        return {
            "rounds": self.rounds,
            "visited_states": self.visited_states,
            "evaluated_states": self.evaluated_states,
            "simulations": self.simulations,
            "actions": [a.to_json() for a in self.actions_taken],
        }


def state_key(s: ShardingState) -> Tuple:
    return s.key()


# --- action space ---------------------------------------------------------


def build_action_space(an: Analysis, mesh: Mesh, cfg: SearchConfig) -> List[Action]:
    actions = []
    for unit in sorted(an.units):
        if an.unit_size(unit) < cfg.min_unique_dims:
            continue
        groups = an.unit_groups(unit)
        for combo in itertools.product((0, 1), repeat=len(groups)):
            bits = tuple(zip(groups, combo))
            for i, axis in enumerate(mesh.names):
                actions.append(Action(unit, bits, axis, i))
    actions.sort(key=Action.sort_key)
    return actions + [STOP]


def apply_action(an: Analysis, mesh: Mesh, s: ShardingState, a: Action) -> ShardingState:
    # axes of one color are kept in mesh order, so action order never matters
    return s.extend(an.units[a.unit], a.axis, dict(a.bits), order=mesh.names)


def _admissible(an: Analysis, mesh: Mesh, s: ShardingState, a: Action) -> bool:
    if a.is_stop:
        return True
    if a.axis in s.used_axes():
        return False
    have = s.bits
    if any(have.get(g, b) != b for g, b in a.bits):
        return False
    return not check_state(an, apply_action(an, mesh, s, a), mesh)


def initial_actions(an: Analysis, mesh: Mesh, cfg: SearchConfig) -> Tuple[Action, ...]:
    return tuple(a for a in build_action_space(an, mesh, cfg) if _admissible(an, mesh, EMPTY_STATE, a))


def step(
    an: Analysis, mesh: Mesh, s: ShardingState, a: Action, remaining: Sequence[Action]
) -> Tuple[ShardingState, Tuple[Action, ...]]:
    """Take ``a`` in ``s``; returns the new state and the still-legal actions."""
    if a not in remaining:
        raise ValueError(f"{a} is not available in this state")
    if a.is_stop:
        return s, ()
    if not _admissible(an, mesh, s, a):
        raise ValueError(f"{a} is invalid in this state")
    s2 = apply_action(an, mesh, s, a)
    rest = tuple(b for b in remaining if b != a and _admissible(an, mesh, s2, b))
    return s2, rest


# --- evaluation -----------------------------------------------------------


class Evaluator:
    """Memoized C(s) of states of one module; thread safe."""

    def __init__(self, an: Analysis, mesh: Mesh, spec: MachineSpec, cfg: SearchConfig):
        self.an, self.mesh, self.spec, self.cfg = an, mesh, spec, cfg
        self.baseline = estimate(apply(an, EMPTY_STATE, mesh), mesh, spec, cfg.cost_options)
        self._cache: Dict[Tuple, Tuple[Score, CostReport]] = {}
        self._lock = threading.Lock()

    def __call__(self, s: ShardingState) -> Tuple[Score, CostReport]:
        k = state_key(s)
        with self._lock:
            hit = self._cache.get(k)
        if hit is not None:
            return hit
        r = estimate(apply(self.an, s, self.mesh), self.mesh, self.spec, self.cfg.cost_options)
        val = (score(r, self.baseline, self.spec, self.cfg.penalty_constant), r)
        with self._lock:
            self._cache.setdefault(k, val)
        return val

    @property
    def evaluated(self) -> int:
        return len(self._cache)


def enumerate_states(an: Analysis, mesh: Mesh, cfg: SearchConfig) -> Iterator[ShardingState]:
    """Every valid state built from eligible units, straight from the definition.

    Each eligible unit gets a set of distinct axes in mesh order, disjoint
    from the other units' axes, and every touched group gets either bit.
    """
    units = [u for u in sorted(an.units) if an.unit_size(u) >= cfg.min_unique_dims]
    axes = mesh.names
    seen = set()

    def assign(i: int, free: Tuple[str, ...], chosen: Dict[int, Tuple[str, ...]]):
        if i == len(units):
            yield dict(chosen)
            return
        u = units[i]
        for k in range(len(free) + 1):
            for perm in itertools.combinations(free, k):
                chosen[u] = perm
                yield from assign(i + 1, tuple(a for a in free if a not in perm), chosen)
        chosen.pop(u, None)

    for chosen in assign(0, axes, {}):
        if sum(len(v) for v in chosen.values()) > cfg.max_depth:
            continue
        axes_of = {c: perm for u, perm in chosen.items() if perm for c in an.units[u]}
        groups = sorted({g for u, perm in chosen.items() if perm for g in an.unit_groups(u)})
        for combo in itertools.product((0, 1), repeat=len(groups)):
            s = ShardingState.make(axes_of, dict(zip(groups, combo)))
            if state_key(s) in seen or check_state(an, s, mesh):
                continue
            seen.add(state_key(s))
            yield s


def exhaustive_search(
    m: Module, mesh: Mesh, spec: MachineSpec, cfg: SearchConfig, an: Optional[Analysis] = None
) -> Tuple[ShardingState, Score, int]:
    """Minimum-C(s) state by brute force; ties go to the smallest state key."""
    an = an or analyze_module(m)
    ev = Evaluator(an, mesh, spec, cfg)
    best: Optional[Tuple[float, Tuple, ShardingState, Score]] = None
    count = 0
    for s in enumerate_states(an, mesh, cfg):
        count += 1
        sc, _ = ev(s)
        cand = (sc.c, state_key(s), s, sc)
        if best is None or cand[:2] < best[:2]:
            best = cand
    return best[2], best[3], count


# --- MCTS -----------------------------------------------------------------


@dataclass(eq=False)
class SearchNode:
    key: Tuple
    state: ShardingState
    remaining: Tuple[Action, ...]
    terminal: bool = False
    visits: int = 0
    total: float = 0.0
    children: Dict[Action, "SearchNode"] = field(default_factory=dict)
    untried: List[Action] = field(default_factory=list)

    def __post_init__(self):
        if not self.terminal:
            self.untried = list(self.remaining)

    @property
    def mean(self) -> float:
        return self.total / self.visits if self.visits else 0.0


class _Tree:
    def __init__(self, an: Analysis, mesh: Mesh, cfg: SearchConfig, ev: Evaluator):
        self.an, self.mesh, self.cfg, self.ev = an, mesh, cfg, ev
        self.nodes: Dict[Tuple, SearchNode] = {}
        self.lock = threading.RLock()
        self.root = self.node(EMPTY_STATE, initial_actions(an, mesh, cfg), False)
        self.best: Optional[Tuple[float, Tuple, ShardingState]] = None
        self.best_actions: List[Action] = []
        self.simulations = 0

    def node(self, s: ShardingState, remaining: Tuple[Action, ...], terminal: bool) -> SearchNode:
        key = (terminal, state_key(s))
        n = self.nodes.get(key)
        if n is None:
            n = SearchNode(key, s, remaining, terminal)
            self.nodes[key] = n
        return n

    def child(self, n: SearchNode, a: Action) -> SearchNode:
        if a.is_stop:
            return self.node(n.state, (), True)
        s2, rest = step(self.an, self.mesh, n.state, a, n.remaining)
        return self.node(s2, rest, False)

    def uct(self, parent: SearchNode, a: Action) -> float:
        c = parent.children[a]
        if c.visits == 0:
            return math.inf
        return c.mean + self.cfg.exploration * math.sqrt(math.log(max(parent.visits, 1)) / c.visits)

    def simulate(self, rng: random.Random) -> None:
        cfg = self.cfg
        with self.lock:
            node = self.root
            path = [node]
            actions: List[Action] = []
            # selection
            while not node.terminal and not node.untried and node.children and len(actions) < cfg.max_depth:
                a = max(sorted(node.children, key=Action.sort_key), key=lambda a: self.uct(node, a))
                actions.append(a)
                node = node.children[a]
                path.append(node)
            # expansion
            if not node.terminal and node.untried and len(actions) < cfg.max_depth:
                a = node.untried.pop(rng.randrange(len(node.untried)))
                child = self.child(node, a)
                node.children[a] = child
                actions.append(a)
                node = child
                path.append(node)
            state, remaining, terminal = node.state, node.remaining, node.terminal
        # rollout
        depth = len(actions)
        while not terminal and remaining and depth < cfg.max_depth:
            if rng.random() < depth / cfg.max_depth:
                break
            a = remaining[rng.randrange(len(remaining))]
            if a.is_stop:
                break
            state, remaining = step(self.an, self.mesh, state, a, remaining)
            actions.append(a)
            depth += 1
        sc, _ = self.ev(state)
        reward = -sc.c
        with self.lock:
            for n in path:
                n.visits += 1
                n.total += reward
            cand = (sc.c, state_key(state), state)
            if self.best is None or cand[:2] < self.best[:2]:
                self.best = cand
                self.best_actions = [a for a in actions if not a.is_stop]
            self.simulations += 1


def mcts_search(
    m: Module,
    mesh: Mesh,
    spec: MachineSpec,
    cfg: SearchConfig = SearchConfig(),
    an: Optional[Analysis] = None,
) -> SearchResult:
    an = an or analyze_module(m)
    ev = Evaluator(an, mesh, spec, cfg)
    tree = _Tree(an, mesh, cfg, ev)
    rngs = [random.Random(cfg.seed * 1_000_003 + w) for w in range(cfg.workers)]
    per_round = max(1, math.ceil(cfg.budget / cfg.rounds))
    history: List[float] = []
    left = cfg.budget
    stalled = 0
    best_c = math.inf
    while left > 0:
        n = min(per_round, left)
        left -= n
        if cfg.workers == 1:
            for _ in range(n):
                tree.simulate(rngs[0])
        else:
            shares = [n // cfg.workers + (w < n % cfg.workers) for w in range(cfg.workers)]

            def work(w: int):
                for _ in range(shares[w]):
                    tree.simulate(rngs[w])

            with ThreadPoolExecutor(cfg.workers) as pool:
                list(pool.map(work, range(cfg.workers)))
        round_best = tree.best[0]
        history.append(round_best)
        if round_best < best_c:
            best_c = round_best
            stalled = 0
        else:
            stalled += 1
            if stalled >= cfg.early_stop_rounds:
                break
    best_state = tree.best[2]
    sc, report = ev(best_state)
    return SearchResult(
        best_state=best_state,
        best_score=sc,
        best_report=report,
        rounds=history,
        actions_taken=list(tree.best_actions),
        visited_states=len({k[1] for k in tree.nodes}),
        evaluated_states=ev.evaluated,
        simulations=tree.simulations,
    )
