"""Mean-field Gaussian Bayesian MLP: sampling, likelihood, KL terms, gradients.

All levels of the hierarchy share one flat parameter layout, layer-major with
weights before biases: W1 (H x K), b1 (H), W2 (H x H), b2 (H), W3 (1 x H), b3 (1).
Tensors are float64; randomness comes from numpy generators so seeds stay in
one place.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
HIDDEN = 20
LOG_2PI = math.log(2 * math.pi)


class ShapeMismatch(ValueError):
    pass


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden: int = HIDDEN

    @property
    def n_params(self) -> int:
        k, h = self.input_dim, self.hidden
        return h * k + h + h * h + h + h + 1

    def unpack(self, w: torch.Tensor):
        k, h = self.input_dim, self.hidden
        if w.shape[-1] != self.n_params:
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {w.shape[-1]}")
        i = 0
        out = []
        for rows, cols in ((h, k), (h, h), (1, h)):
            out.append(w[i:i + rows * cols].view(rows, cols))
            i += rows * cols
            out.append(w[i:i + rows])
            i += rows
        return out

    def to_json(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": self.hidden, "n_params": self.n_params,
                "layout": "W1,b1,W2,b2,W3,b3 (row-major)"}


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian over the flat weight vector, ``sigma = softplus(rho)``."""

    mu: torch.Tensor
    rho: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return F.softplus(self.rho)

    def detach(self) -> GaussianParams:
        return GaussianParams(self.mu.detach().clone(), self.rho.detach().clone())

    def leaf(self) -> GaussianParams:
        return GaussianParams(self.mu.detach().clone().requires_grad_(True),
                              self.rho.detach().clone().requires_grad_(True))

    def equal(self, other: GaussianParams) -> bool:
        return torch.equal(self.mu, other.mu) and torch.equal(self.rho, other.rho)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard deviation as arrays."""
        return self.mu.detach().numpy().copy(), self.sigma.detach().numpy().copy()

    def to_json(self) -> dict:
        return {"mu": self.mu.detach().tolist(), "rho": self.rho.detach().tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> GaussianParams:
        return cls(torch.tensor(obj["mu"], dtype=DTYPE), torch.tensor(obj["rho"], dtype=DTYPE))


def init_params(shape: NetworkShape, rng, mu_std: float = 0.1, rho: float = -3.0) -> GaussianParams:
    mu = rng.normal(0.0, mu_std, shape.n_params)
    return GaussianParams(torch.from_numpy(mu), torch.full((shape.n_params,), float(rho), dtype=DTYPE))


@dataclass(frozen=True)
class ScaleMixturePrior:
    pi: float = 1.0
    sigma1: float = 0.1
    sigma2: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.pi <= 1.0:
            raise ValueError("pi must lie in (0, 1]")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("mixture scales must be positive")

    def log_prob(self, w: torch.Tensor) -> torch.Tensor:
        lp1 = _normal_logpdf(w, 0.0, self.sigma1)
        if self.pi == 1.0:
            return lp1.sum(-1)
        lp2 = _normal_logpdf(w, 0.0, self.sigma2)
        stacked = torch.stack([lp1 + math.log(self.pi), lp2 + math.log1p(-self.pi)])
        return torch.logsumexp(stacked, dim=0).sum(-1)


def _normal_logpdf(w, mu, sigma):
    sigma = sigma if isinstance(sigma, torch.Tensor) else torch.tensor(sigma, dtype=DTYPE)
    return -0.5 * LOG_2PI - torch.log(sigma) - 0.5 * ((w - mu) / sigma) ** 2


def draw_noise(n: int, rng, size: int | None = None) -> torch.Tensor:
    shape = (n,) if size is None else (size, n)
    return torch.from_numpy(rng.standard_normal(shape))


def sample_weights(q: GaussianParams, rng, eps: torch.Tensor | None = None):
    """Reparameterised draw ``mu + sigma * eps``; returns the weights and ``eps``."""
    if eps is None:
        eps = draw_noise(q.mu.shape[-1], rng)
    return q.mu + q.sigma * eps, eps


def forward(shape: NetworkShape, w: torch.Tensor, x) -> torch.Tensor:
    """Two ReLU hidden layers and a linear scalar head; returns shape ``(m,)``."""
    x = as_tensor(x)
    if x.shape[-1] != shape.input_dim:
        raise ShapeMismatch(f"expected {shape.input_dim} features, got {x.shape[-1]}")
    w1, b1, w2, b2, w3, b3 = shape.unpack(w)
    h = torch.relu(x @ w1.T + b1)
    h = torch.relu(h @ w2.T + b2)
    return (h @ w3.T + b3).squeeze(-1)


def nll(shape: NetworkShape, w: torch.Tensor, x, y, obs_sigma: float = 0.1) -> torch.Tensor:
    """Gaussian negative log-likelihood summed over the batch."""
    if obs_sigma <= 0:
        raise ValueError("obs_sigma must be positive")
    r = as_tensor(y) - forward(shape, w, x)
    return (0.5 * LOG_2PI + math.log(obs_sigma) + 0.5 * (r / obs_sigma) ** 2).sum()


def kl_gaussian(q: GaussianParams, p_mu, p_sigma) -> torch.Tensor:
    p_mu = as_tensor(p_mu)
    p_sigma = as_tensor(p_sigma)
    s = q.sigma
    return (torch.log(p_sigma / s) + (s ** 2 + (q.mu - p_mu) ** 2) / (2 * p_sigma ** 2) - 0.5).sum()


def kl_scale_mixture_terms(q: GaussianParams, prior: ScaleMixturePrior, n_mc: int, rng) -> torch.Tensor:
    """Per-draw log-ratios ``log q(w) - log p(w)``; their mean estimates the KL."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    eps = draw_noise(q.mu.shape[-1], rng, size=n_mc)
    s = q.sigma
    w = q.mu + s * eps
    log_q = (-0.5 * LOG_2PI - torch.log(s) - 0.5 * eps ** 2).sum(-1)
    return log_q - prior.log_prob(w)


def kl_scale_mixture_mc(q: GaussianParams, prior: ScaleMixturePrior, n_mc: int, rng) -> torch.Tensor:
    return kl_scale_mixture_terms(q, prior, n_mc, rng).mean()


def task_loss(shape: NetworkShape, gamma: GaussianParams, prior_mu, prior_sigma, x, y,
              n_mc: int = 1, lam: float = 0.01, rng=None, obs_sigma: float = 0.1,
              eps: torch.Tensor | None = None) -> torch.Tensor:
    """``lam * KL(q_gamma || prior) + mean_s nll(w_s)`` over ``n_mc`` reparameterised draws.

    ``eps`` may be passed (shape ``(n_mc, P)``) to hold the draws fixed.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if eps is None:
        eps = draw_noise(shape.n_params, rng, size=n_mc)
    s = gamma.sigma
    fit = sum(nll(shape, gamma.mu + s * e, x, y, obs_sigma) for e in eps) / len(eps)
    return lam * kl_gaussian(gamma, prior_mu, prior_sigma) + fit


def grad(loss_fn: Callable[[GaussianParams], torch.Tensor], q: GaussianParams):
    """Exact gradient of ``loss_fn`` at ``q`` w.r.t. ``(mu, rho)``."""
    leaf = q.leaf()
    value = loss_fn(leaf)
    g_mu, g_rho = torch.autograd.grad(value, (leaf.mu, leaf.rho))
    return g_mu, g_rho


def value_and_grad(loss_fn: Callable[[GaussianParams], torch.Tensor], q: GaussianParams):
    leaf = q.leaf()
    value = loss_fn(leaf)
    g_mu, g_rho = torch.autograd.grad(value, (leaf.mu, leaf.rho))
    return float(value.detach()), (g_mu, g_rho)


def predictive_samples(shape: NetworkShape, q: GaussianParams, x, n_samples: int, rng) -> np.ndarray:
    """Forward outputs for ``n_samples`` weight draws, shape ``(n_samples, m)``."""
    with torch.no_grad():
        eps = draw_noise(shape.n_params, rng, size=n_samples)
        return np.stack([forward(shape, q.mu + q.sigma * e, x).numpy() for e in eps])
