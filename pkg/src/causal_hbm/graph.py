"""DAGs over K features plus a target, d-separation, and structural distances.

Node index ``K`` (the last node) is always the target ``Y``. Adjacency is a
dense boolean matrix with ``adj[u, v]`` meaning an edge ``u -> v``.
"""

from __future__ import annotations

import heapq
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

INTERVENTION = "intervention"
COVARIATE = "covariate"
TARGET = "target"
ROLES = (INTERVENTION, COVARIATE, TARGET)

MAX_NODES = 64


class CyclicGraph(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class InvalidDag(ValueError):
    pass


@dataclass(frozen=True)
class Dag:
    """Immutable directed graph with optional node roles.

    ``roles`` may be ``None`` for plain graphs used in graph-algorithm tests;
    task DAGs always carry roles and satisfy :func:`validate`.
    """

    adj: np.ndarray
    roles: tuple[str, ...] | None = None
    _parents: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    _children: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj = np.array(self.adj, dtype=bool, copy=True)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ShapeMismatch(f"adjacency must be square, got {adj.shape}")
        if adj.shape[0] > MAX_NODES:
            raise ShapeMismatch(f"at most {MAX_NODES} nodes supported")
        if np.any(np.diag(adj)):
            raise InvalidDag("self loops are not allowed")
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)
        if self.roles is not None:
            roles = tuple(self.roles)
            if len(roles) != adj.shape[0] or any(r not in ROLES for r in roles):
                raise InvalidDag(f"bad roles {roles!r}")
            object.__setattr__(self, "roles", roles)
        n = adj.shape[0]
        object.__setattr__(self, "_parents", tuple(tuple(np.flatnonzero(adj[:, v])) for v in range(n)))
        object.__setattr__(self, "_children", tuple(tuple(np.flatnonzero(adj[u])) for u in range(n)))

    def __eq__(self, other):
        if not isinstance(other, Dag):
            return NotImplemented
        return self.roles == other.roles and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash((self.adj.tobytes(), self.adj.shape, self.roles))

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[Sequence[int]], roles=None) -> Dag:
        adj = np.zeros((n_nodes, n_nodes), dtype=bool)
        for u, v in edges:
            adj[u, v] = True
        return cls(adj, roles)

    @property
    def n_nodes(self) -> int:
        return self.adj.shape[0]

    @property
    def target(self) -> int:
        return self.n_nodes - 1

    def parents(self, v: int) -> tuple[int, ...]:
        return self._parents[v]

    def children(self, u: int) -> tuple[int, ...]:
        return self._children[u]

    def edges(self) -> list[tuple[int, int]]:
        return [(int(u), int(v)) for u, v in zip(*np.nonzero(self.adj))]

    def nodes_with_role(self, role: str) -> tuple[int, ...]:
        if self.roles is None:
            return ()
        return tuple(i for i, r in enumerate(self.roles) if r == role)

    @property
    def intervention_nodes(self) -> tuple[int, ...]:
        return self.nodes_with_role(INTERVENTION)

    def to_json(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "edges": [list(e) for e in self.edges()],
            "roles": list(self.roles) if self.roles is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> Dag:
        return cls.from_edges(obj["n_nodes"], obj["edges"], obj.get("roles"))


def topological_order(g: Dag) -> list[int]:
    """Kahn's algorithm, ties broken by ascending node index."""
    indeg = g.adj.sum(axis=0).astype(int)
    heap = [v for v in range(g.n_nodes) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v in g.children(u):
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(order) != g.n_nodes:
        raise CyclicGraph("graph contains a directed cycle")
    return order


def is_acyclic(g: Dag) -> bool:
    try:
        topological_order(g)
    except CyclicGraph:
        return False
    return True


def descendants(g: Dag, u: int) -> set[int]:
    if not 0 <= u < g.n_nodes:
        raise IndexError(u)
    seen: set[int] = set()
    stack = list(g.children(u))
    while stack:
        v = stack.pop()
        if v not in seen:
            seen.add(v)
            stack.extend(g.children(v))
    seen.discard(u)
    return seen


def ancestors(g: Dag, v: int) -> set[int]:
    seen: set[int] = set()
    stack = list(g.parents(v))
    while stack:
        u = stack.pop()
        if u not in seen:
            seen.add(u)
            stack.extend(g.parents(u))
    seen.discard(v)
    return seen


def validate(g: Dag) -> None:
    """Raise :class:`InvalidDag` unless ``g`` satisfies the task-DAG rules."""
    if not is_acyclic(g):
        raise InvalidDag("graph is cyclic")
    if g.roles is None:
        raise InvalidDag("task DAGs need node roles")
    targets = g.nodes_with_role(TARGET)
    if targets != (g.target,):
        raise InvalidDag(f"exactly one target at index {g.target} required, got {targets}")
    if g.children(g.target):
        raise InvalidDag("target has outgoing edges")
    for v in g.intervention_nodes:
        if g.parents(v):
            raise InvalidDag(f"intervention node {v} has parents")
        if g.target not in descendants(g, v):
            raise InvalidDag(f"intervention node {v} has no directed path to the target")


def is_valid(g: Dag) -> bool:
    try:
        validate(g)
    except InvalidDag:
        return False
    return True


def d_separated(g: Dag, x: int, y: int, z: Iterable[int]) -> bool:
    """Reachability ("Bayes ball") test for x ⊥ y | z."""
    z = set(z)
    if x == y or x in z or y in z:
        raise ValueError("x, y must differ and lie outside z")
    # ancestors of z (inclusive) decide which colliders are open
    anc_z = set(z)
    stack = list(z)
    while stack:
        v = stack.pop()
        for p in g.parents(v):
            if p not in anc_z:
                anc_z.add(p)
                stack.append(p)

    visited: set[tuple[int, bool]] = set()
    # (node, arrived_from_child)
    stack2: list[tuple[int, bool]] = [(x, True)]
    while stack2:
        v, up = stack2.pop()
        if (v, up) in visited:
            continue
        visited.add((v, up))
        if v == y:
            return False
        if up:
            if v not in z:
                stack2.extend((p, True) for p in g.parents(v))
                stack2.extend((c, False) for c in g.children(v))
        else:
            if v not in z:
                stack2.extend((c, False) for c in g.children(v))
            if v in anc_z:
                stack2.extend((p, True) for p in g.parents(v))
    return True


def shd(g1: Dag, g2: Dag) -> int:
    """Number of directed edge slots that differ (a reversal counts twice)."""
    if g1.n_nodes != g2.n_nodes:
        raise ShapeMismatch(f"{g1.n_nodes} vs {g2.n_nodes} nodes")
    return int(np.count_nonzero(g1.adj != g2.adj))


def valid_adjustment(g: Dag, i: int, j: int, z: Iterable[int]) -> bool:
    """Generalised adjustment criterion for the effect of ``i`` on ``j``.

    ``z`` must contain no descendant of a non-``i`` node on a directed
    ``i -> j`` path, and must d-separate ``i`` and ``j`` once the first edge of
    every such path is removed.
    """
    z = set(z)
    if i == j or i in z or j in z:
        raise ValueError("i, j must differ and lie outside z")
    de_i = descendants(g, i)
    if j in de_i:
        on_path = de_i & (ancestors(g, j) | {j})
    else:
        on_path = set()
    forbidden = set(on_path)
    for w in on_path:
        forbidden |= descendants(g, w)
    if z & forbidden:
        return False
    if on_path:
        adj = g.adj.copy()
        for w in on_path:
            adj[i, w] = False
        g = Dag(adj, g.roles)
    return d_separated(g, i, j, z)


def sid(g_true: Dag, g_other: Dag) -> int:
    """Ordered pairs whose parent-adjustment estimate from ``g_other`` is wrong in ``g_true``."""
    if g_true.n_nodes != g_other.n_nodes:
        raise ShapeMismatch(f"{g_true.n_nodes} vs {g_other.n_nodes} nodes")
    count = 0
    for i in range(g_true.n_nodes):
        pa = set(g_other.parents(i))
        de_i = descendants(g_true, i)
        for j in range(g_true.n_nodes):
            if j == i:
                continue
            if j in pa:
                count += j in de_i
            elif not valid_adjustment(g_true, i, j, pa):
                count += 1
    return count
