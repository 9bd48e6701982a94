"""Wasserstein distances between task samples and the causal task distances.

Known causal models are compared with OD/ID (Monte Carlo, common random
numbers) and SHD/SID, combined into TOD/TID. Unknown models fall back to the
observational proxy (OP) and the stratified interventional proxy (IP).
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix, vstack
from scipy.spatial.distance import cdist

from . import graph
from .data import TaskDataset
from .scm import Scm, propagate, to_rows

KINDS = ("TOD", "TID", "OP", "IP")
KAPPA_DEFAULT = (1.0, 0.5, 0.25)
# largest replicated problem solved as an assignment before switching to an LP
_MAX_REPLICATED = 256


class EmptySample(ValueError):
    pass


class NoInterventionVariables(ValueError):
    pass


class NoInterventionData(ValueError):
    pass


class MissingEmbeddings(KeyError):
    pass


class MissingGroundTruth(KeyError):
    pass


@dataclass(frozen=True)
class DistanceMatrix:
    d: np.ndarray
    task_ids: tuple[int, ...]
    kind: str = ""

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] != len(self.task_ids):
            raise ValueError("distance matrix must be square and match task_ids")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("distances must be finite and non-negative")
        if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0):
            raise ValueError("distance matrix must be symmetric with zero diagonal")
        object.__setattr__(self, "task_ids", tuple(int(i) for i in self.task_ids))

    def __eq__(self, other):
        if not isinstance(other, DistanceMatrix):
            return NotImplemented
        return self.task_ids == other.task_ids and self.kind == other.kind and np.array_equal(self.d, other.d)

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.task_ids)

    def to_json(self) -> dict:
        return {"n": self.n, "kind": self.kind, "task_ids": list(self.task_ids),
                "entries": self.d.ravel().tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> DistanceMatrix:
        n = obj["n"]
        return cls(np.array(obj["entries"], dtype=float).reshape(n, n),
                   tuple(obj.get("task_ids", range(n))), obj.get("kind", ""))


@dataclass(frozen=True)
class DistanceSpec:
    kind: str
    alpha1: float = 1.0
    alpha2: float = 1.0
    id_samples: int = 500
    interventions_grid: tuple[float, ...] = (1.0,)
    kappa: tuple[float, float, float] = KAPPA_DEFAULT
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.kind in ("TOD", "TID"):
            if self.alpha1 < 0 or self.alpha2 < 0 or (self.alpha1 == 0 and self.alpha2 == 0):
                raise ValueError("alpha1, alpha2 must be >= 0 and not both zero")
        if self.id_samples < 1:
            raise ValueError("id_samples must be positive")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @classmethod
    def named(cls, name: str, **kw) -> DistanceSpec:
        """Shorthands: SHD, SID, OD, ID, TOD, TID, OP, IP, IP1, IP2, IP3."""
        presets = {
            "SHD": dict(kind="TOD", alpha1=0.0, alpha2=1.0),
            "OD": dict(kind="TOD", alpha1=1.0, alpha2=0.0),
            "SID": dict(kind="TID", alpha1=0.0, alpha2=1.0),
            "ID": dict(kind="TID", alpha1=1.0, alpha2=0.0),
            "TOD": dict(kind="TOD"),
            "TID": dict(kind="TID"),
            "OP": dict(kind="OP"),
            "IP": dict(kind="IP"),
            "IP1": dict(kind="IP"),
            "IP2": dict(kind="IP", kappa=(1.0, 0.0, 0.0)),
            "IP3": dict(kind="IP", kappa=(1.0, 1.0, 1.0)),
        }
        key = name.upper()
        if key not in presets:
            raise ValueError(f"unknown distance name {name!r}")
        params = {**presets[key], **kw}
        params.setdefault("name", key)
        return cls(**params)

    def to_json(self) -> dict:
        return {"kind": self.kind, "alpha1": self.alpha1, "alpha2": self.alpha2,
                "id_samples": self.id_samples, "interventions_grid": list(self.interventions_grid),
                "kappa": list(self.kappa), "seed": self.seed, "name": self.name}

    @classmethod
    def from_json(cls, obj: dict) -> DistanceSpec:
        obj = dict(obj)
        if "kind" not in obj:
            name = obj.pop("name")
            return cls.named(name, **{k: _tuplify(v) for k, v in obj.items()})
        return cls(**{k: _tuplify(v) for k, v in obj.items()})


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


def _check_samples(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise EmptySample("both sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise graph.ShapeMismatch(f"dimension {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _transport_lp(cost: np.ndarray) -> float:
    m, k = cost.shape
    rows = np.repeat(np.arange(m), k)
    cols = np.arange(m * k)
    a_rows = coo_matrix((np.ones(m * k), (rows, cols)), shape=(m, m * k))
    a_cols = coo_matrix((np.ones(m * k), (np.tile(np.arange(k), m), cols)), shape=(k, m * k))
    a_eq = vstack([a_rows, a_cols])
    b_eq = np.concatenate([np.full(m, 1.0 / m), np.full(k, 1.0 / k)])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W1 between uniform empirical measures with Euclidean ground cost.

    Equal sizes are an assignment problem. Unequal sizes replicate each point
    up to the least common multiple (the transport LP has integral optimal
    vertices after scaling, so this is still exact); very large multiples go
    to an LP solver instead.
    """
    a, b = _check_samples(a, b)
    m, k = len(a), len(b)
    if m == k:
        cost = cdist(a, b)
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / m)
    lcm = m * k // math.gcd(m, k)
    if lcm <= _MAX_REPLICATED:
        cost = cdist(np.repeat(a, lcm // m, axis=0), np.repeat(b, lcm // k, axis=0))
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / lcm)
    return _transport_lp(cdist(a, b))


def _crn_noise(n_nodes: int, m: int, rng) -> np.ndarray:
    return np.random.default_rng(rng).standard_normal((m, n_nodes))


def observational_rows(scm: Scm, z: np.ndarray) -> np.ndarray:
    return to_rows(scm, propagate(scm, z * scm.noise_std))


def interventional_rows(scm: Scm, z: np.ndarray, node: int, value: float) -> np.ndarray:
    return to_rows(scm, propagate(scm, z * scm.noise_std, node, value))


def od(scm_i: Scm, scm_j: Scm, m: int, rng) -> float:
    """Observational distance; both sides share one block of standard-normal noise."""
    if scm_i.n_nodes != scm_j.n_nodes:
        raise graph.ShapeMismatch("SCMs differ in node count")
    z = _crn_noise(scm_i.n_nodes, m, rng)
    return wasserstein(observational_rows(scm_i, z), observational_rows(scm_j, z))


def _intervention_nodes(scm_i: Scm, scm_j: Scm) -> tuple[int, ...]:
    nodes = scm_i.graph.intervention_nodes
    if nodes != scm_j.graph.intervention_nodes:
        raise ValueError("SCMs disagree on intervention variables")
    if not nodes:
        raise NoInterventionVariables("no intervention variables to intervene on")
    return nodes


def id_distance(scm_i: Scm, scm_j: Scm, m: int, rng, values: Sequence[float] = (1.0,)) -> float:
    """Interventional distance: mean W1 over hard interventions on each intervention variable."""
    nodes = _intervention_nodes(scm_i, scm_j)
    rng = np.random.default_rng(rng)
    terms = []
    for v in nodes:
        for value in values:
            z = _crn_noise(scm_i.n_nodes, m, rng)
            terms.append(wasserstein(interventional_rows(scm_i, z, v, value),
                                     interventional_rows(scm_j, z, v, value)))
    return float(np.mean(terms))


def tod(scm_i: Scm, scm_j: Scm, spec: DistanceSpec, rng=None) -> float:
    if scm_i is None or scm_j is None:
        raise MissingGroundTruth("TOD needs both task SCMs")
    out = spec.alpha2 * graph.shd(scm_i.graph, scm_j.graph)
    if spec.alpha1:
        out += spec.alpha1 * od(scm_i, scm_j, spec.id_samples, spec.seed if rng is None else rng)
    return float(out)


def tid(scm_i: Scm, scm_j: Scm, spec: DistanceSpec, rng=None) -> float:
    """``alpha1 * ID + alpha2 * SID`` with SID measured against ``scm_i``'s graph."""
    if scm_i is None or scm_j is None:
        raise MissingGroundTruth("TID needs both task SCMs")
    out = spec.alpha2 * graph.sid(scm_i.graph, scm_j.graph)
    if spec.alpha1:
        out += spec.alpha1 * id_distance(scm_i, scm_j, spec.id_samples,
                                         spec.seed if rng is None else rng, spec.interventions_grid)
    return float(out)


def task_rows(task: TaskDataset) -> np.ndarray:
    x, _, y = task.observed()
    return np.column_stack([x, y])


def op_proxy(data_i: TaskDataset, data_j: TaskDataset) -> float:
    return wasserstein(task_rows(data_i), task_rows(data_j))


def stratum(task: TaskDataset, v: int) -> np.ndarray:
    x, t, y = task.observed()
    keep = t == v
    return np.column_stack([x[keep], y[keep]])


def nearest_in_parameter_space(i: int, candidates: Sequence[int],
                               embeddings: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> int:
    """Candidate whose diagonal-Gaussian posterior is W2-closest to task ``i``'s."""
    if not candidates:
        raise ValueError("no candidates")
    missing = [k for k in (i, *candidates) if k not in embeddings]
    if missing:
        raise MissingEmbeddings(f"no local posterior for tasks {missing[:5]}")
    mu_i, sd_i = embeddings[i]
    ordered = sorted(candidates)
    dists = [math.sqrt(float(np.sum((mu_i - embeddings[k][0]) ** 2) + np.sum((sd_i - embeddings[k][1]) ** 2)))
             for k in ordered]
    return ordered[int(np.argmin(dists))]


def ip_proxy(data_i: TaskDataset, data_j: TaskDataset, all_tasks: Sequence[TaskDataset],
             local_embeddings: Mapping | None, intervention_nodes: Sequence[int],
             kappa: Sequence[float] = KAPPA_DEFAULT) -> float:
    """κ-weighted mean of per-intervention OP terms with nearest-task substitution.

    ``all_tasks`` is the substitution pool. When every usable term has weight
    zero (possible under ablation weights), the plain OP is returned.
    """
    if not intervention_nodes:
        raise NoInterventionVariables("no intervention variables")
    weighted, total = 0.0, 0.0
    used = 0
    for v in intervention_nodes:
        sides = []
        n_sub = 0
        for task in (data_i, data_j):
            rows = stratum(task, v)
            if len(rows) == 0:
                pool = [t.task_id for t in all_tasks if t.task_id != task.task_id and len(stratum(t, v))]
                if not pool:
                    break
                if local_embeddings is None:
                    raise MissingEmbeddings("substitution needs local embeddings")
                k = nearest_in_parameter_space(task.task_id, pool, local_embeddings)
                rows = stratum(_by_id(all_tasks, k), v)
                n_sub += 1
            sides.append(rows)
        if len(sides) < 2:
            continue
        used += 1
        w = kappa[n_sub]
        if w:
            weighted += w * wasserstein(sides[0], sides[1])
            total += w
    if not used:
        raise NoInterventionData(f"tasks {data_i.task_id}, {data_j.task_id}: no interventional data")
    if total == 0:
        return op_proxy(data_i, data_j)
    return weighted / total


def _by_id(tasks: Sequence[TaskDataset], task_id: int) -> TaskDataset:
    for t in tasks:
        if t.task_id == task_id:
            return t
    raise KeyError(task_id)


@dataclass
class CausalDistance:
    """Pairwise distance between tasks for one :class:`DistanceSpec`.

    Monte Carlo samples for OD/ID are drawn once per task from a shared noise
    block seeded by ``spec.seed``, so every pair sees common random numbers
    and results do not depend on evaluation order.
    """

    spec: DistanceSpec
    scms: Mapping[int, Scm] | None = None
    embeddings: Mapping | None = None
    pool: Sequence[TaskDataset] = ()
    intervention_nodes: tuple[int, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def _scm(self, task: TaskDataset) -> Scm:
        if self.scms is None or task.task_id not in self.scms:
            raise MissingGroundTruth(f"no SCM for task {task.task_id}")
        return self.scms[task.task_id]

    def _noise(self, n_nodes: int, key) -> np.ndarray:
        ck = ("z", key)
        if ck not in self._cache:
            seq = np.random.SeedSequence([self.spec.seed, *key])
            self._cache[ck] = np.random.default_rng(seq).standard_normal((self.spec.id_samples, n_nodes))
        return self._cache[ck]

    def _obs(self, task: TaskDataset) -> np.ndarray:
        key = ("obs", task.task_id)
        if key not in self._cache:
            scm = self._scm(task)
            self._cache[key] = observational_rows(scm, self._noise(scm.n_nodes, (0,)))
        return self._cache[key]

    def _int(self, task: TaskDataset, v: int, k: int, value: float) -> np.ndarray:
        key = ("int", task.task_id, v, k)
        if key not in self._cache:
            scm = self._scm(task)
            self._cache[key] = interventional_rows(scm, self._noise(scm.n_nodes, (1, v, k)), v, value)
        return self._cache[key]

    def __call__(self, a: TaskDataset, b: TaskDataset) -> float:
        s = self.spec
        if s.kind == "OP":
            return op_proxy(a, b)
        if s.kind == "IP":
            return ip_proxy(a, b, self.pool, self.embeddings, self.intervention_nodes, s.kappa)
        sa, sb = self._scm(a), self._scm(b)
        if s.kind == "TOD":
            out = s.alpha2 * graph.shd(sa.graph, sb.graph)
            if s.alpha1:
                out += s.alpha1 * wasserstein(self._obs(a), self._obs(b))
            return float(out)
        out = s.alpha2 * self._sid(a, b) if s.alpha2 else 0.0
        if s.alpha1:
            nodes = _intervention_nodes(sa, sb)
            terms = [wasserstein(self._int(a, v, k, val), self._int(b, v, k, val))
                     for v in nodes for k, val in enumerate(s.interventions_grid)]
            out += s.alpha1 * float(np.mean(terms))
        return float(out)

    def _sid(self, a: TaskDataset, b: TaskDataset) -> float:
        # SID is asymmetric; the matrix entry uses the symmetrised mean
        ga, gb = self._scm(a).graph, self._scm(b).graph
        return 0.5 * (graph.sid(ga, gb) + graph.sid(gb, ga))


def make_distance(spec: DistanceSpec, scms=None, embeddings=None, pool=(),
                  intervention_nodes=()) -> CausalDistance:
    return CausalDistance(spec, scms, embeddings, tuple(pool), tuple(intervention_nodes))


def distance_matrix(tasks: Sequence[TaskDataset], spec: DistanceSpec, scms=None, embeddings=None,
                    pool: Sequence[TaskDataset] | None = None, intervention_nodes=(),
                    dist: Callable | None = None) -> DistanceMatrix:
    """All-pairs distances, each unordered pair evaluated once."""
    if dist is None:
        dist = make_distance(spec, scms, embeddings, tasks if pool is None else pool, intervention_nodes)
    n = len(tasks)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = dist(tasks[i], tasks[j])
    return DistanceMatrix(d, tuple(t.task_id for t in tasks), spec.label)


def cross_distances(new_tasks: Sequence[TaskDataset], train_tasks: Sequence[TaskDataset],
                    dist: Callable) -> np.ndarray:
    return np.array([[dist(a, b) for b in train_tasks] for a in new_tasks]).reshape(len(new_tasks), len(train_tasks))
