import json

import numpy as np
import oracles
import pytest
from conftest import random_dag
from hypothesis import given
from hypothesis import strategies as st

from causal_hbm import graph
from causal_hbm.graph import Dag

CHAIN = Dag.from_edges(3, [(0, 1), (1, 2)])
COLLIDER = Dag.from_edges(3, [(0, 1), (2, 1)])
DIAMOND = Dag.from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)])


@st.composite
def dags(draw, max_nodes=6):
    n = draw(st.integers(2, max_nodes))
    seed = draw(st.integers(0, 2**32 - 1))
    p = draw(st.floats(0.0, 1.0))
    return random_dag(np.random.default_rng(seed), n, p)


def test_topological_order_examples():
    assert graph.topological_order(Dag.from_edges(2, [(0, 1)])) == [0, 1]
    assert graph.topological_order(Dag(np.zeros((3, 3), bool))) == [0, 1, 2]
    with pytest.raises(graph.CyclicGraph):
        graph.topological_order(Dag.from_edges(2, [(0, 1), (1, 0)]))


@given(dags())
def test_topological_order_respects_edges(g):
    pos = {v: k for k, v in enumerate(graph.topological_order(g))}
    assert all(pos[u] < pos[v] for u, v in g.edges())


def test_descendants_examples():
    assert graph.descendants(CHAIN, 0) == {1, 2}
    assert graph.descendants(CHAIN, 2) == set()
    assert graph.descendants(DIAMOND, 0) == {1, 2, 3}
    assert graph.ancestors(DIAMOND, 3) == {0, 1, 2}


def test_dag_rejects_self_loop_and_bad_shape():
    with pytest.raises(graph.InvalidDag):
        Dag.from_edges(2, [(0, 0)])
    with pytest.raises(graph.ShapeMismatch):
        Dag(np.zeros((2, 3), bool))


def test_dag_is_immutable_and_hashable():
    g = Dag.from_edges(3, [(0, 1)])
    with pytest.raises(ValueError):
        g.adj[0, 2] = True
    assert hash(g) == hash(Dag.from_edges(3, [(0, 1)]))
    assert g != Dag.from_edges(3, [(1, 0)])


def test_json_round_trip():
    g = Dag.from_edges(3, [(0, 2), (1, 2)], ["intervention", "covariate", "target"])
    assert Dag.from_json(json.loads(json.dumps(g.to_json()))) == g


def test_validate_task_rules():
    roles = ["intervention", "covariate", "target"]
    graph.validate(Dag.from_edges(3, [(0, 1), (1, 2)], roles))
    bad = [
        [(0, 1), (1, 2), (2, 1)],  # cycle
        [(0, 1), (1, 2), (2, 0)],  # target with a child
        [(1, 0), (1, 2)],  # intervention with a parent, no path to target
        [(1, 2)],  # intervention without a path to target
    ]
    for edges in bad:
        assert not graph.is_valid(Dag.from_edges(3, edges, roles))


def test_d_separation_examples():
    assert graph.d_separated(CHAIN, 0, 2, {1})
    assert not graph.d_separated(CHAIN, 0, 2, set())
    assert graph.d_separated(COLLIDER, 0, 2, set())
    assert not graph.d_separated(COLLIDER, 0, 2, {1})
    # conditioning on a descendant of a collider opens it too
    g = Dag.from_edges(4, [(0, 1), (2, 1), (1, 3)])
    assert not graph.d_separated(g, 0, 2, {3})


@given(dags(), st.data())
def test_d_separation_matches_path_enumeration(g, data):
    n = g.n_nodes
    x, y = data.draw(st.lists(st.integers(0, n - 1), min_size=2, max_size=2, unique=True))
    rest = [v for v in range(n) if v not in (x, y)]
    z = data.draw(st.lists(st.sampled_from(rest), unique=True)) if rest else []
    assert graph.d_separated(g, x, y, z) == oracles.d_separated_paths(g.adj, x, y, z)


@given(dags(), st.data())
def test_d_separation_is_symmetric(g, data):
    x, y = data.draw(st.lists(st.integers(0, g.n_nodes - 1), min_size=2, max_size=2, unique=True))
    assert graph.d_separated(g, x, y, []) == graph.d_separated(g, y, x, [])


def test_shd_examples():
    g1 = Dag.from_edges(3, [(0, 1)])
    assert graph.shd(g1, g1) == 0
    assert graph.shd(g1, Dag.from_edges(3, [(0, 1), (0, 2)])) == 1
    assert graph.shd(g1, Dag.from_edges(3, [(1, 0)])) == 2
    with pytest.raises(graph.ShapeMismatch):
        graph.shd(g1, Dag.from_edges(4, []))


@given(dags(), dags())
def test_shd_is_a_metric_on_slots(a, b):
    if a.n_nodes != b.n_nodes:
        return
    assert graph.shd(a, b) == graph.shd(b, a) == oracles.shd_slots(a.adj, b.adj)


def test_valid_adjustment_examples():
    assert graph.valid_adjustment(CHAIN, 0, 2, set())
    assert not graph.valid_adjustment(CHAIN, 0, 2, {1})
    confounded = Dag.from_edges(3, [(2, 0), (2, 1), (0, 1)])
    assert graph.valid_adjustment(confounded, 0, 1, {2})
    assert not graph.valid_adjustment(confounded, 0, 1, set())


def test_sid_examples_against_oracle():
    rng = np.random.default_rng(0)
    empty = Dag(np.zeros((3, 3), bool))
    assert graph.sid(CHAIN, CHAIN) == 0
    assert graph.sid(CHAIN, empty) == oracles.sid_gaussian(CHAIN.adj, empty.adj, rng)
    assert graph.sid(empty, CHAIN) == oracles.sid_gaussian(empty.adj, CHAIN.adj, rng)
    # the empty guess misses all three nonzero effects of the chain;
    # the chain guess adjusts correctly for every null effect of the empty truth
    assert graph.sid(CHAIN, empty) == 3
    assert graph.sid(empty, CHAIN) == 0


@given(dags(5), st.integers(0, 2**32 - 1))
def test_sid_matches_gaussian_oracle(g, seed):
    rng = np.random.default_rng(seed)
    other = random_dag(rng, g.n_nodes, rng.uniform())
    assert graph.sid(g, other) == oracles.sid_gaussian(g.adj, other.adj, rng)


@given(dags())
def test_sid_zero_on_itself(g):
    assert graph.sid(g, g) == 0
