"""Three-level hierarchical BNN trainer, new-task prediction and baselines.

Levels: a global posterior ``psi`` (with a scale-mixture prior), one
posterior per causal group ``psi_c`` (prior centred on ``psi``), and
per-task posteriors ``gamma`` adapted on the fly from their group.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import vi
from .data import TaskDataset
from .vi import GaussianParams, NetworkShape, ScaleMixturePrior

log = logging.getLogger(__name__)

MODES = ("first_order", "unrolled")


class NonFiniteLoss(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class EmptyGroup(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class TrainerConfig:
    n_groups: int = 1
    inner_steps: int = 2
    lr_local: float = 1e-4
    lr_group: float = 1e-4
    lr_global: float = 1e-4
    cold_weight: float = 0.01
    epochs: int = 50
    patience: int = 10
    predictive_samples: int = 20
    seed: int = 0
    meta_gradient_mode: str = "first_order"
    obs_sigma: float = 0.1
    n_mc: int = 1
    warm_start_epochs: int = 5
    init_mu_std: float = 0.1
    init_rho: float = -3.0
    prior: ScaleMixturePrior = field(default_factory=ScaleMixturePrior)
    # global and local BNN baselines
    baseline_lr: float = 1e-4
    baseline_epochs: int = 50
    baseline_batch_size: int = 20
    local_steps: int = 100

    def __post_init__(self):
        if isinstance(self.prior, dict):
            self.prior = ScaleMixturePrior(**self.prior)
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if min(self.lr_local, self.lr_group, self.lr_global) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.predictive_samples < 1 or self.n_groups < 1:
            raise ValueError("predictive_samples and n_groups must be >= 1")
        if self.meta_gradient_mode not in MODES:
            raise ValueError(f"meta_gradient_mode must be one of {MODES}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> TrainerConfig:
        return cls(**obj)


@dataclass
class HierarchicalParams:
    shape: NetworkShape
    psi: GaussianParams
    psi_c: list[GaussianParams]

    @property
    def n_groups(self) -> int:
        return len(self.psi_c)

    def detach(self) -> HierarchicalParams:
        return HierarchicalParams(self.shape, self.psi.detach(), [p.detach() for p in self.psi_c])

    def equal(self, other: HierarchicalParams) -> bool:
        return (self.shape == other.shape and self.psi.equal(other.psi)
                and len(self.psi_c) == len(other.psi_c)
                and all(a.equal(b) for a, b in zip(self.psi_c, other.psi_c)))

    def to_json(self) -> dict:
        return {"shape": self.shape.to_json(), "global": self.psi.to_json(),
                "groups": [p.to_json() for p in self.psi_c]}

    @classmethod
    def from_json(cls, obj: dict) -> HierarchicalParams:
        shape = NetworkShape(obj["shape"]["input_dim"], obj["shape"]["hidden"])
        return cls(shape, GaussianParams.from_json(obj["global"]),
                   [GaussianParams.from_json(p) for p in obj["groups"]])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    kl_task: float
    kl_group: float
    kl_global: float
    skipped: int = 0


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_rmse", "kl_task", "kl_group", "kl_global", "skipped"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_rmse), repr(r.kl_task),
                        repr(r.kl_group), repr(r.kl_global), r.skipped])
        return buf.getvalue()

    def __eq__(self, other):
        return isinstance(other, TrainingLog) and self.to_csv() == other.to_csv() \
            and self.best_epoch == other.best_epoch


def network_shape(tasks: Sequence[TaskDataset]) -> NetworkShape:
    return NetworkShape(tasks[0].n_features)


def default_init(shape: NetworkShape, cfg: TrainerConfig) -> GaussianParams:
    rng = np.random.default_rng([cfg.seed, 0])
    return vi.init_params(shape, rng, cfg.init_mu_std, cfg.init_rho)


def _t(a) -> torch.Tensor:
    return vi.as_tensor(a)


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"lengths differ: {y_true.shape} vs {y_pred.shape}")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def inner_adapt(init: GaussianParams, prior_mu, prior_sigma, x, y, steps: int, lr: float,
                lam: float, rng, shape: NetworkShape, n_mc: int = 1, obs_sigma: float = 0.1,
                create_graph: bool = False) -> GaussianParams:
    """``steps`` plain gradient steps on the support task loss starting from ``init``.

    With ``create_graph`` the result stays differentiable w.r.t. ``init`` and
    the prior, which the unrolled meta-gradient needs.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x, y = _t(x), _t(y)
    if create_graph:
        mu, rho = init.mu, init.rho
    else:
        mu, rho = init.mu.detach(), init.rho.detach()
        prior_mu, prior_sigma = _t(prior_mu).detach(), _t(prior_sigma).detach()
    for _ in range(steps):
        if not create_graph:
            mu = mu.detach().requires_grad_(True)
            rho = rho.detach().requires_grad_(True)
        loss = vi.task_loss(shape, GaussianParams(mu, rho), prior_mu, prior_sigma, x, y,
                            n_mc, lam, rng, obs_sigma)
        if not torch.isfinite(loss):
            raise NonFiniteLoss("support loss is not finite")
        g_mu, g_rho = torch.autograd.grad(loss, (mu, rho), create_graph=create_graph)
        mu = mu - lr * g_mu
        rho = rho - lr * g_rho
    if not create_graph:
        mu, rho = mu.detach(), rho.detach()
    return GaussianParams(mu, rho)


def _adapt(params: HierarchicalParams, group: int, x, y, cfg: TrainerConfig, rng) -> GaussianParams:
    start = params.psi_c[group]
    return inner_adapt(start, start.mu, start.sigma, x, y, cfg.inner_steps, cfg.lr_local,
                       cfg.cold_weight, rng, params.shape, cfg.n_mc, cfg.obs_sigma)


def predict_new_task(params: HierarchicalParams, group: int, x_support, y_support, x_query,
                     cfg: TrainerConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Adapt from the group posterior on the support set, then average S predictive draws."""
    if not 0 <= group < params.n_groups:
        raise ValueError(f"group {group} out of range")
    if len(x_support) == 0:
        raise ValueError("support set is empty")
    gamma = _adapt(params, group, x_support, y_support, cfg, rng)
    draws = vi.predictive_samples(params.shape, gamma, x_query, cfg.predictive_samples, rng)
    return draws.mean(axis=0), draws


def predict_hbm(params: HierarchicalParams, tasks: Sequence[TaskDataset], groups: Mapping[int, int],
                cfg: TrainerConfig, stream: int = 17) -> dict[int, np.ndarray]:
    """Query predictions per task; each task uses its own seeded stream."""
    out = {}
    for t in tasks:
        rng = np.random.default_rng([cfg.seed, stream, t.task_id])
        out[t.task_id], _ = predict_new_task(params, groups[t.task_id], t.x_support, t.y_support,
                                             t.x_query, cfg, rng)
    return out


def score(predictions: Mapping[int, np.ndarray], tasks: Sequence[TaskDataset]) -> dict[int, float]:
    return {t.task_id: rmse(t.y_query, predictions[t.task_id]) for t in tasks}


def evaluate_hbm(params: HierarchicalParams, tasks: Sequence[TaskDataset], groups: Mapping[int, int],
                 cfg: TrainerConfig, stream: int = 17) -> dict[int, float]:
    return score(predict_hbm(params, tasks, groups, cfg, stream), tasks)


def _check_groups(train_tasks, groups, C):
    sizes = np.zeros(C, dtype=int)
    for t in train_tasks:
        c = groups[t.task_id]
        if not 0 <= c < C:
            raise ValueError(f"task {t.task_id}: group {c} outside [0, {C})")
        sizes[c] += 1
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        raise EmptyGroup(f"groups {empty.tolist()} have no training tasks")
    return sizes


def _outer_step(params: HierarchicalParams, task: TaskDataset, c: int, n_c: int, n_total: int,
                cfg: TrainerConfig, rng):
    """Gradients of the per-task outer objective w.r.t. ``psi_c`` and ``psi``."""
    shape, lam = params.shape, cfg.cold_weight
    pc = params.psi_c[c].leaf()
    p = params.psi.leaf()
    xs, ys, xq, yq = _t(task.x_support), _t(task.y_support), _t(task.x_query), _t(task.y_query)
    unrolled = cfg.meta_gradient_mode == "unrolled"
    if unrolled:
        gamma = inner_adapt(pc, pc.mu, pc.sigma, xs, ys, cfg.inner_steps, cfg.lr_local, lam, rng,
                            shape, cfg.n_mc, cfg.obs_sigma, create_graph=True)
    else:
        gamma = inner_adapt(params.psi_c[c], pc.mu, pc.sigma, xs, ys, cfg.inner_steps, cfg.lr_local,
                            lam, rng, shape, cfg.n_mc, cfg.obs_sigma).leaf()
    kl_task = vi.kl_gaussian(gamma, pc.mu, pc.sigma)
    eps = vi.draw_noise(shape.n_params, rng, size=cfg.n_mc)
    fit = sum(vi.nll(shape, gamma.mu + gamma.sigma * e, xq, yq, cfg.obs_sigma) for e in eps) / len(eps)
    kl_group = vi.kl_gaussian(pc, p.mu, p.sigma)
    kl_global = vi.kl_scale_mixture_mc(p, cfg.prior, cfg.n_mc, rng)
    query_loss = lam * kl_task + fit
    total = query_loss + lam * kl_group / n_c + lam * kl_global / n_total
    if not torch.isfinite(total):
        raise NonFiniteLoss("outer objective is not finite")
    if unrolled:
        g = torch.autograd.grad(total, (pc.mu, pc.rho, p.mu, p.rho))
        g_pc = (g[0], g[1])
    else:
        g = torch.autograd.grad(total, (pc.mu, pc.rho, p.mu, p.rho, gamma.mu, gamma.rho))
        # first-order meta-gradient: d gamma / d psi_c taken as the identity
        g_pc = (g[0] + g[4], g[1] + g[5])
    stats = tuple(float(v.detach()) for v in (query_loss, kl_task, kl_group, kl_global))
    return g_pc, (g[2], g[3]), stats


def _sgd(q: GaussianParams, g, lr: float) -> GaussianParams:
    return GaussianParams((q.mu - lr * g[0]).detach(), (q.rho - lr * g[1]).detach())


def train(train_tasks: Sequence[TaskDataset], val_tasks: Sequence[TaskDataset],
          groups: Mapping[int, int], cfg: TrainerConfig, init: GaussianParams | None = None,
          shape: NetworkShape | None = None) -> tuple[HierarchicalParams, TrainingLog]:
    """Run the hierarchical training loop with early stopping on validation RMSE.

    ``groups`` maps task id to causal group and must cover the training and
    validation tasks. Returns the parameters of the best validation epoch
    (epoch 0 is the initialisation).
    """
    shape = shape or network_shape(train_tasks)
    C = cfg.n_groups
    sizes = _check_groups(train_tasks, groups, C)
    start = init.detach() if init is not None else default_init(shape, cfg)
    params = HierarchicalParams(shape, start.detach(), [start.detach() for _ in range(C)])
    rng = np.random.default_rng([cfg.seed, 1])
    n_total = len(train_tasks)

    def validate(p: HierarchicalParams) -> float:
        if not val_tasks:
            return float("nan")
        return float(np.mean(list(evaluate_hbm(p, val_tasks, groups, cfg, stream=7).values())))

    tlog = TrainingLog()
    best_val = validate(params)
    best = params.detach()
    tlog.records.append(EpochRecord(0, float("nan"), best_val, 0.0, 0.0, 0.0))
    bad_epochs = 0
    consecutive_failures = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, kls = [], []
        skipped = 0
        for idx in rng.permutation(n_total):
            task = train_tasks[idx]
            c = groups[task.task_id]
            try:
                g_pc, g_p, stats = _outer_step(params, task, c, int(sizes[c]), n_total, cfg, rng)
            except NonFiniteLoss as exc:
                skipped += 1
                consecutive_failures += 1
                log.warning("epoch %d task %d skipped: %s", epoch, task.task_id, exc)
                if consecutive_failures >= 3:
                    raise TrainingDiverged(f"three consecutive non-finite losses (epoch {epoch})") from exc
                continue
            consecutive_failures = 0
            params.psi_c[c] = _sgd(params.psi_c[c], g_pc, cfg.lr_group)
            params.psi = _sgd(params.psi, g_p, cfg.lr_global)
            losses.append(stats[0])
            kls.append(stats[1:])
        kl_mean = np.mean(kls, axis=0) if kls else (float("nan"),) * 3
        val = validate(params)
        tlog.records.append(EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"),
                                        val, *map(float, kl_mean), skipped))
        if not val_tasks:
            best, tlog.best_epoch = params.detach(), epoch
            continue
        if val < best_val:
            best_val, best, tlog.best_epoch = val, params.detach(), epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                tlog.stopped_early = True
                break
    return best, tlog


def all_zero_groups(tasks: Sequence[TaskDataset]) -> dict[int, int]:
    return {t.task_id: 0 for t in tasks}


def train_meta(train_tasks, val_tasks, cfg: TrainerConfig, init: GaussianParams | None = None,
               shape: NetworkShape | None = None):
    """Flat Bayesian meta-learning: the hierarchical trainer with a single group."""
    cfg1 = replace(cfg, n_groups=1)
    return train(train_tasks, val_tasks, all_zero_groups([*train_tasks, *val_tasks]), cfg1, init, shape)


def warm_start(train_tasks, val_tasks, cfg: TrainerConfig, shape: NetworkShape | None = None) -> GaussianParams:
    """Short flat meta-learning run whose learned prior seeds every level."""
    shape = shape or network_shape(train_tasks)
    if cfg.warm_start_epochs == 0:
        return default_init(shape, cfg)
    params, _ = train_meta(train_tasks, val_tasks, replace(cfg, epochs=cfg.warm_start_epochs), shape=shape)
    return params.psi_c[0].detach()


def fit_hierarchical(train_tasks, val_tasks, groups: Mapping[int, int], cfg: TrainerConfig,
                     shape: NetworkShape | None = None):
    init = warm_start(train_tasks, val_tasks, cfg, shape)
    return train(train_tasks, val_tasks, groups, cfg, init, shape)


def local_embeddings(params: HierarchicalParams, tasks: Sequence[TaskDataset], cfg: TrainerConfig,
                     group: int = 0) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Adapted local posteriors (mean, std) per task, used to pick substitute tasks."""
    out = {}
    for t in tasks:
        x, _, y = t.observed()
        rng = np.random.default_rng([cfg.seed, 13, t.task_id])
        out[t.task_id] = _adapt(params, group, x, y, cfg, rng).numpy()
    return out


# ---------------------------------------------------------------- baselines

def _pooled(tasks: Sequence[TaskDataset]):
    x = np.concatenate([np.concatenate([t.x_support, t.x_query]) for t in tasks])
    y = np.concatenate([np.concatenate([t.y_support, t.y_query]) for t in tasks])
    return x, y


def predict_global(q: GaussianParams, tasks: Sequence[TaskDataset], cfg: TrainerConfig,
                   shape: NetworkShape, stream: int = 19) -> dict[int, np.ndarray]:
    out = {}
    for t in tasks:
        rng = np.random.default_rng([cfg.seed, stream, t.task_id])
        out[t.task_id] = vi.predictive_samples(shape, q, t.x_query, cfg.predictive_samples, rng).mean(axis=0)
    return out


def evaluate_global(q: GaussianParams, tasks: Sequence[TaskDataset], cfg: TrainerConfig,
                    shape: NetworkShape, stream: int = 19) -> dict[int, float]:
    return score(predict_global(q, tasks, cfg, shape, stream), tasks)


def train_global(train_tasks, val_tasks, cfg: TrainerConfig, shape: NetworkShape | None = None):
    """One BNN on all pooled training rows (support and query), minibatch SGD on the ELBO."""
    shape = shape or network_shape(train_tasks)
    x, y = _pooled(train_tasks)
    x, y = _t(x), _t(y)
    n = len(y)
    rng = np.random.default_rng([cfg.seed, 3])
    q = default_init(shape, cfg)
    lam = cfg.cold_weight

    def validate(q):
        if not val_tasks:
            return float("nan")
        return float(np.mean(list(evaluate_global(q, val_tasks, cfg, shape, stream=5).values())))

    best_val, best = validate(q), q.detach()
    tlog = TrainingLog([EpochRecord(0, float("nan"), best_val, 0.0, 0.0, 0.0)])
    bad = 0
    for epoch in range(1, cfg.baseline_epochs + 1):
        losses, kls = [], []
        order = rng.permutation(n)
        for start in range(0, n, cfg.baseline_batch_size):
            idx = torch.from_numpy(order[start:start + cfg.baseline_batch_size])
            xb, yb = x[idx], y[idx]
            frac = len(idx) / n

            def loss_fn(p):
                w, _ = vi.sample_weights(p, rng)
                kl = vi.kl_scale_mixture_mc(p, cfg.prior, cfg.n_mc, rng)
                kls.append(float(kl.detach()))
                return vi.nll(shape, w, xb, yb, cfg.obs_sigma) + lam * frac * kl

            value, g = vi.value_and_grad(loss_fn, q)
            if not np.isfinite(value):
                raise TrainingDiverged("global baseline loss is not finite")
            q = _sgd(q, g, cfg.baseline_lr)
            losses.append(value)
        val = validate(q)
        tlog.records.append(EpochRecord(epoch, float(np.mean(losses)), val, 0.0, 0.0, float(np.mean(kls))))
        if not val_tasks:
            best, tlog.best_epoch = q.detach(), epoch
            continue
        if val < best_val:
            best_val, best, tlog.best_epoch, bad = val, q.detach(), epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                tlog.stopped_early = True
                break
    return best, tlog


def train_local(tasks: Sequence[TaskDataset], cfg: TrainerConfig,
                shape: NetworkShape | None = None) -> dict[int, GaussianParams]:
    """An independent BNN per task, fitted on its support set only."""
    shape = shape or network_shape(tasks)
    out = {}
    for t in tasks:
        rng = np.random.default_rng([cfg.seed, 11, t.task_id])
        q = vi.init_params(shape, rng, cfg.init_mu_std, cfg.init_rho)
        xs, ys = _t(t.x_support), _t(t.y_support)

        def loss_fn(p):
            w, _ = vi.sample_weights(p, rng)
            return vi.nll(shape, w, xs, ys, cfg.obs_sigma) + cfg.cold_weight * vi.kl_scale_mixture_mc(
                p, cfg.prior, cfg.n_mc, rng)

        for _ in range(cfg.local_steps):
            value, g = vi.value_and_grad(loss_fn, q)
            if not np.isfinite(value):
                break
            q = _sgd(q, g, cfg.baseline_lr)
        out[t.task_id] = q
    return out


def predict_local(models: Mapping[int, GaussianParams], tasks: Sequence[TaskDataset], cfg: TrainerConfig,
                  shape: NetworkShape) -> dict[int, np.ndarray]:
    out = {}
    for t in tasks:
        rng = np.random.default_rng([cfg.seed, 23, t.task_id])
        out[t.task_id] = vi.predictive_samples(shape, models[t.task_id], t.x_query,
                                               cfg.predictive_samples, rng).mean(axis=0)
    return out


def evaluate_local(models: Mapping[int, GaussianParams], tasks: Sequence[TaskDataset], cfg: TrainerConfig,
                   shape: NetworkShape) -> dict[int, float]:
    return score(predict_local(models, tasks, cfg, shape), tasks)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: HierarchicalParams, cfg: TrainerConfig, groups: Mapping[int, int],
                    tlog: TrainingLog | None = None) -> None:
    """Write ``params.json`` and ``train_log.csv`` atomically into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = {"params": params.to_json(), "config": cfg.to_json(),
               "groups": {str(k): int(v) for k, v in sorted(groups.items())}}
    _atomic_write(path / "params.json", json.dumps(payload))
    if tlog is not None:
        _atomic_write(path / "train_log.csv", tlog.to_csv())


def load_checkpoint(path) -> tuple[HierarchicalParams, TrainerConfig, dict[int, int]]:
    payload = json.loads((Path(path) / "params.json").read_text())
    groups = {int(k): v for k, v in payload["groups"].items()}
    return HierarchicalParams.from_json(payload["params"]), TrainerConfig.from_json(payload["config"]), groups


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
