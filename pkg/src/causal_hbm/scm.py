"""Linear-Gaussian SCMs and the hierarchical toy-model generator."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from . import graph
from .data import NO_INTERVENTION, MultiTaskDataset, TaskDataset
from .graph import COVARIATE, INTERVENTION, TARGET, Dag


class RejectionExhausted(RuntimeError):
    pass


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Scm:
    """``weights[v, u]`` is the coefficient of parent ``u`` in the equation of ``v``."""

    graph: Dag
    weights: np.ndarray
    noise_std: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        s = np.array(self.noise_std, dtype=float, copy=True)
        n = self.graph.n_nodes
        if w.shape != (n, n) or s.shape != (n,):
            raise graph.ShapeMismatch("weights/noise_std do not match the graph")
        if np.any(w[~self.graph.adj.T] != 0):
            raise ValueError("non-zero weight on an absent edge")
        if np.any(s <= 0):
            raise ValueError("noise_std must be positive")
        w.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noise_std", s)

    def __eq__(self, other):
        if not isinstance(other, Scm):
            return NotImplemented
        return (
            self.graph == other.graph
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.noise_std, other.noise_std)
        )

    __hash__ = None

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def to_json(self) -> dict:
        return {
            "dag": self.graph.to_json(),
            "weights": self.weights.tolist(),
            "noise_std": self.noise_std.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Scm:
        return cls(Dag.from_json(obj["dag"]), np.array(obj["weights"]), np.array(obj["noise_std"]))


class Samples(NamedTuple):
    x: np.ndarray
    tag: np.ndarray
    y: np.ndarray


def propagate(scm: Scm, noise: np.ndarray, do_node=None, do_value: float = 1.0) -> np.ndarray:
    """Push exogenous noise through the structural equations.

    ``noise`` is ``(m, n)`` and already scaled. ``do_node`` is ``None``, a
    single node, or a per-row array of node indices with -1 meaning no
    intervention. Returns raw node values (no sigmoid).
    """
    m, n = noise.shape
    if do_node is None:
        rows_do = np.full(m, NO_INTERVENTION)
    else:
        rows_do = np.broadcast_to(np.asarray(do_node), (m,))
    vals = np.zeros((m, n))
    w = scm.weights
    for v in graph.topological_order(scm.graph):
        vals[:, v] = vals @ w[v] + noise[:, v]
        hit = rows_do == v
        if hit.any():
            vals[hit, v] = do_value
    return vals


def sample_nodes(scm: Scm, m: int, intervention=None, rng=None) -> np.ndarray:
    """Raw (pre-sigmoid) ancestral samples of every node, shape ``(m, n)``."""
    rng = np.random.default_rng(rng)
    noise = rng.standard_normal((m, scm.n_nodes)) * scm.noise_std
    if intervention is None:
        return propagate(scm, noise)
    node, value = intervention
    return propagate(scm, noise, node, value)


def to_rows(scm: Scm, vals: np.ndarray) -> np.ndarray:
    """Features followed by the sigmoid-rescaled target, one row per sample."""
    out = vals.copy()
    out[:, scm.graph.target] = expit(out[:, scm.graph.target])
    return out


def sample(scm: Scm, m: int, intervention=None, rng=None) -> Samples:
    if intervention is not None:
        node = intervention[0]
        if scm.graph.roles is not None and scm.graph.roles[node] != INTERVENTION:
            raise ValueError(f"node {node} is not an intervention variable")
    vals = sample_nodes(scm, m, intervention, rng)
    t = scm.graph.target
    tag = np.full(m, NO_INTERVENTION if intervention is None else intervention[0])
    return Samples(vals[:, :t], tag, expit(vals[:, t]))


def analytic_gaussian_joint(scm: Scm, intervention=None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form mean and covariance of all nodes before the sigmoid."""
    n = scm.n_nodes
    b = np.array(scm.weights)
    var = np.square(scm.noise_std)
    shift = np.zeros(n)
    if intervention is not None:
        node, value = intervention
        b[node] = 0.0
        var = var.copy()
        var[node] = 0.0
        shift[node] = value
    a = np.eye(n) - b
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(inv)):
        raise SingularSystem("(I - B) is singular")
    return inv @ shift, inv @ np.diag(var) @ inv.T


def default_reference_dag() -> Dag:
    """Two interventions, five covariates and the target (nodes I0, I1, C2..C6, Y)."""
    roles = [INTERVENTION] * 2 + [COVARIATE] * 5 + [TARGET]
    edges = [(0, 2), (1, 3), (2, 4), (3, 4), (2, 7), (4, 7), (5, 7), (6, 5)]
    return Dag.from_edges(8, edges, roles)


def _flip_mask(g: Dag, order: Sequence[int] | None = None) -> np.ndarray:
    # only slots running forward in a fixed node order, so flips never create cycles
    order = graph.topological_order(g) if order is None else list(order)
    rank = np.empty(g.n_nodes, dtype=int)
    rank[order] = np.arange(g.n_nodes)
    mask = rank[:, None] < rank[None, :]
    mask[g.target, :] = False
    for v in g.intervention_nodes:
        mask[:, v] = False
    return mask


def perturb_dag(base: Dag, eta: float, rng, max_attempts: int = 1000,
                order: Sequence[int] | None = None) -> Dag:
    """Flip eligible edge slots with a shared probability ``p ~ U(0, eta)``.

    Eligible slots go forward in ``order`` (default: a topological order of
    ``base``). ``p`` is drawn once; flips are redrawn until the task-DAG rules
    hold.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if eta == 0.0:
        return base
    mask = _flip_mask(base, order)
    if np.any(base.adj & ~mask):
        raise ValueError("base has edges running against the flip order")
    p = rng.uniform(0.0, eta)
    for _ in range(max_attempts):
        flips = (rng.random(base.adj.shape) < p) & mask
        cand = Dag(base.adj ^ flips, base.roles)
        if graph.is_valid(cand):
            return cand
    raise RejectionExhausted(f"no valid DAG after {max_attempts} attempts (eta={eta}, p={p:.3f})")


def perturb_params(base: Scm, new_graph: Dag, sigma: float, rng) -> Scm:
    """Jitter inherited coefficients; edges new to ``new_graph`` are centred at 0."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    edges = new_graph.adj.T
    inherited = np.where(base.graph.adj.T & edges, base.weights, 0.0)
    jitter = sigma * rng.standard_normal(edges.shape)
    return Scm(new_graph, np.where(edges, inherited + jitter, 0.0), base.noise_std)


@dataclass
class ToyModelConfig:
    n_train: int = 200
    n_val: int = 30
    n_test: int = 30
    m_support: int = 10
    m_query: int = 10
    n_groups: int = 1
    reference_dag: Dag | None = None
    sigma_ref: float = 1.0
    sigma_group: float = 0.1
    sigma_task: float = 1e-4
    eta_group: float = 0.6
    eta_task: float = 0.05
    noise_std: float = 0.1
    intervention_noise_std: float = 1.0
    intervention_value: float = 1.0
    # chance that a task never receives one of its intervention variables
    missing_stratum_prob: float = 0.0
    max_attempts: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test", "m_support", "m_query", "n_groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("eta_group", "eta_task", "missing_stratum_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("sigma_ref", "sigma_group", "sigma_task"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> ToyModelConfig:
        base = dict(n_train=50, n_val=10, n_test=10)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> dict:
        d = asdict(self)
        d["reference_dag"] = None if self.reference_dag is None else self.reference_dag.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ToyModelConfig:
        obj = dict(obj)
        if obj.get("reference_dag") not in (None, "default"):
            obj["reference_dag"] = Dag.from_json(obj["reference_dag"])
        else:
            obj["reference_dag"] = None
        return cls(**obj)


@dataclass
class GeneratedDataset(MultiTaskDataset):
    group_scms: list[Scm] = field(default_factory=list)
    reference_scm: Scm | None = None
    config: ToyModelConfig | None = None

    @property
    def group_labels_all(self) -> np.ndarray:
        return np.array([t.group for t in self.tasks], dtype=int)


def _assign_groups(count: int, n_groups: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(count) % n_groups)


def _task_samples(scm: Scm, cfg: ToyModelConfig, seed: int, task_id: int) -> Samples:
    rng = np.random.default_rng([seed, task_id])
    options = [NO_INTERVENTION, *scm.graph.intervention_nodes]
    if cfg.missing_stratum_prob > 0 and len(options) > 1 and rng.random() < cfg.missing_stratum_prob:
        options.remove(options[1 + rng.integers(len(options) - 1)])
    m = cfg.m_support + cfg.m_query
    tags = rng.choice(options, size=m)
    noise = rng.standard_normal((m, scm.n_nodes)) * scm.noise_std
    vals = propagate(scm, noise, tags, cfg.intervention_value)
    t = scm.graph.target
    return Samples(vals[:, :t], tags, expit(vals[:, t]))


def generate_toy_dataset(cfg: ToyModelConfig) -> GeneratedDataset:
    rng = np.random.default_rng(cfg.seed)
    ref_dag = cfg.reference_dag or default_reference_dag()
    graph.validate(ref_dag)
    n = ref_dag.n_nodes
    noise_std = np.full(n, cfg.noise_std)
    noise_std[list(ref_dag.intervention_nodes)] = cfg.intervention_noise_std
    ref_weights = np.where(ref_dag.adj.T, rng.normal(0.0, cfg.sigma_ref, (n, n)), 0.0)
    reference = Scm(ref_dag, ref_weights, noise_std)
    order = graph.topological_order(ref_dag)

    group_scms = []
    for _ in range(cfg.n_groups):
        g = perturb_dag(ref_dag, cfg.eta_group, rng, cfg.max_attempts, order)
        group_scms.append(perturb_params(reference, g, cfg.sigma_group, rng))

    labels = np.concatenate([
        _assign_groups(cfg.n_train, cfg.n_groups, rng),
        _assign_groups(cfg.n_val, cfg.n_groups, rng),
        _assign_groups(cfg.n_test, cfg.n_groups, rng),
    ])
    splits = ["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test

    tasks, task_scms = [], {}
    ms = cfg.m_support
    for task_id, (split, c) in enumerate(zip(splits, labels)):
        parent = group_scms[c]
        g = perturb_dag(parent.graph, cfg.eta_task, rng, cfg.max_attempts, order)
        scm = perturb_params(parent, g, cfg.sigma_task, rng)
        task_scms[task_id] = scm
        s = _task_samples(scm, cfg, cfg.seed, task_id)
        tasks.append(TaskDataset(
            task_id=task_id, split=split,
            x_support=s.x[:ms], t_support=s.tag[:ms], y_support=s.y[:ms],
            x_query=s.x[ms:], t_query=s.tag[ms:], y_query=s.y[ms:],
            group=int(c),
        ))

    return GeneratedDataset(
        tasks=tasks,
        intervention_nodes=ref_dag.intervention_nodes,
        task_scms=task_scms,
        meta={"source": "toy", "n_groups": cfg.n_groups, "roles": list(ref_dag.roles)},
        group_scms=group_scms,
        reference_scm=reference,
        config=cfg,
    )
