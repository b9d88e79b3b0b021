"""Learning a Gaussian prior over latents at a fixed timestep.

The prior is ``z = a * mu + L @ eps`` with ``mu`` a full latent and ``L`` a
structured Cholesky factor (or the fixed ``b * I``).  Parameters follow
heavy-ball momentum SGD on the batch-averaged criterion, and ``mu`` is
rescaled after every step so its standard deviation never exceeds the
reference taken from the initializing clean estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .backend.attention import preprocess_attention
from .criterion import CriterionConfig, loss_combined

DIAG_FLOOR = 1e-4
COV_KINDS = ("fixed", "scalar", "chan-scalar", "diag", "block")


class OptimizationError(RuntimeError):
    """Raised when the loss or gradient becomes non-finite."""


@dataclass(frozen=True)
class CovSpec:
    """Covariance structure: kind, channel sharing and block size."""

    kind: str = "fixed"
    shared: bool = True
    block: int = 0

    def __post_init__(self):
        if self.kind not in COV_KINDS:
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.kind == "block" and self.block < 1:
            raise ValueError("block covariance needs a positive block size")

    @classmethod
    def parse(cls, text: str, shared: bool = True) -> "CovSpec":
        if text.startswith("block:"):
            try:
                size = int(text.split(":", 1)[1])
            except ValueError:
                raise ValueError(f"bad block size in {text!r}") from None
            return cls("block", shared, size)
        return cls(text, shared)

    @property
    def label(self) -> str:
        return f"block:{self.block}" if self.kind == "block" else self.kind

    @property
    def learnable(self) -> bool:
        return self.kind != "fixed"

    def storage_shape(self, shape: tuple[int, int, int]) -> tuple[int, ...] | None:
        c, h, w = shape
        groups = 1 if self.shared else c
        if self.kind == "fixed":
            return None
        if self.kind == "scalar":
            return (1, 1, 1)
        if self.kind == "chan-scalar":
            return (c, 1, 1)
        if self.kind == "diag":
            return (groups, h, w)
        if (h * w) % self.block:
            raise ValueError(f"block size {self.block} does not divide {h * w} spatial positions")
        return (groups, h * w // self.block, self.block, self.block)

    def n_params(self, shape: tuple[int, int, int]) -> int:
        """Number of free values (lower-triangular entries for block kinds)."""
        st = self.storage_shape(shape)
        if st is None:
            return 0
        if self.kind == "block":
            return st[0] * st[1] * self.block * (self.block + 1) // 2
        return int(np.prod(st))


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 50
    lr: float = 20.0
    momentum: float = 0.4
    batch: int = 10
    rescale: bool = True
    cov_lr: float | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")


@dataclass
class GaussianPrior:
    t_star: float
    a: float
    b: float
    mu: np.ndarray
    sigma_ref: float
    cov: CovSpec = field(default_factory=CovSpec)
    chol: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape


@dataclass
class OptimResult:
    prior: GaussianPrior
    losses: list[float]
    mu_std: list[float]


def init_chol(cov: CovSpec, shape: tuple[int, int, int], b: float) -> np.ndarray | None:
    st = cov.storage_shape(shape)
    if st is None:
        return None
    if cov.kind == "block":
        chol = np.zeros(st)
        idx = np.arange(cov.block)
        chol[..., idx, idx] = b
        return chol
    return np.full(st, float(b))


def init_prior(z0_hat: np.ndarray, t_star: float, a: float, b: float,
               cov: CovSpec = CovSpec()) -> GaussianPrior:
    """Prior whose mean is the per-channel spatial mean of ``z0_hat``.

    Args:
        z0_hat: Clean-latent estimate ``C x H x W`` at ``t_star``.
        t_star: Timestep the prior lives at.
        a: Signal coefficient at ``t_star``.
        b: Noise coefficient at ``t_star``.
        cov: Covariance structure; learnable kinds start at ``b * I``.
    """
    z0_hat = np.asarray(z0_hat, dtype=np.float64)
    mu = np.broadcast_to(z0_hat.mean(axis=(1, 2), keepdims=True), z0_hat.shape).copy()
    return GaussianPrior(float(t_star), float(a), float(b), mu, float(z0_hat.std()), cov,
                         init_chol(cov, z0_hat.shape, b))


def rescale_mu(mu: np.ndarray, sigma_ref: float) -> np.ndarray:
    """Shrink ``mu`` toward zero so that ``std(mu) <= sigma_ref``."""
    if sigma_ref <= 0:
        raise ValueError("reference std must be positive")
    s = float(np.std(mu))
    if s > sigma_ref:
        return mu * (sigma_ref / s)
    return mu


def _tril_mask(block: int) -> np.ndarray:
    return np.tril(np.ones((block, block)))


def apply_chol(cov: CovSpec, chol, eps, b: float):
    """Structured ``L @ eps`` for a batch ``eps`` of shape ``B x C x H x W``.

    Works on tape tensors and, through ``T.Tensor`` wrapping, on arrays.
    """
    if cov.kind == "fixed" or chol is None:
        return T.scale(eps, b)
    if cov.kind != "block":
        return T.mul(chol, eps)
    bsz, c, h, w = eps.shape
    nb = h * w // cov.block
    lower = T.mul(chol, _tril_mask(cov.block))
    cols = T.reshape(eps, (bsz, c, nb, cov.block, 1))
    return T.reshape(T.matmul(lower, cols), (bsz, c, h, w))


def _clamp_diag(cov: CovSpec, chol: np.ndarray) -> np.ndarray:
    if cov.kind == "block":
        out = chol.copy()
        idx = np.arange(cov.block)
        out[..., idx, idx] = np.maximum(out[..., idx, idx], DIAG_FLOOR)
        return out
    return np.maximum(chol, DIAG_FLOOR)


def optimize_prior(prior: GaussianPrior, objective: Callable[[T.Tensor], T.Tensor], config: OptimConfig,
                   rng: np.random.Generator, learn_cov: bool = False) -> OptimResult:
    """Momentum SGD on ``E_eps[objective(a * mu + L eps)]``.

    Args:
        prior: Starting prior; not modified.
        objective: Maps a latent batch ``B x C x H x W`` to ``B`` losses.
        config: Step count, learning rate, momentum, batch and rescaling.
        rng: Source of the eps draws.
        learn_cov: Also update the Cholesky factor; otherwise it stays frozen.

    Returns:
        The final prior, the mean loss before each update and ``std(mu)``
        after each update.
    """
    if learn_cov and not prior.cov.learnable:
        raise ValueError("covariance learning needs a learnable covariance kind")
    mu = prior.mu.copy()
    chol = None if prior.chol is None else prior.chol.copy()
    vel = np.zeros_like(mu)
    vel_c = None if chol is None else np.zeros_like(chol)
    lr_c = config.lr if config.cov_lr is None else config.cov_lr
    shape = (config.batch,) + mu.shape
    losses: list[float] = []
    stds: list[float] = []
    for step in range(config.steps):
        eps = T.Tensor(rng.standard_normal(shape))
        mu_t = T.Tensor(mu, requires_grad=True)
        chol_t = None if chol is None else T.Tensor(chol, requires_grad=learn_cov)
        z = T.add(T.scale(mu_t, prior.a), apply_chol(prior.cov, chol_t, eps, prior.b))
        loss = T.mean(objective(z))
        value = loss.item()
        if not np.isfinite(value):
            raise OptimizationError(f"non-finite loss at optimizer step {step}")
        loss.backward()
        g = mu_t.grad if mu_t.grad is not None else np.zeros_like(mu)
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient at optimizer step {step}")
        vel = config.momentum * vel - config.lr * g
        mu = mu + vel
        if learn_cov:
            gc = chol_t.grad if chol_t.grad is not None else np.zeros_like(chol)
            if not np.all(np.isfinite(gc)):
                raise OptimizationError(f"non-finite covariance gradient at optimizer step {step}")
            vel_c = config.momentum * vel_c - lr_c * gc
            chol = _clamp_diag(prior.cov, chol + vel_c)
        if config.rescale:
            mu = rescale_mu(mu, prior.sigma_ref)
        losses.append(value)
        stds.append(float(np.std(mu)))
    return OptimResult(replace(prior, mu=mu, chol=chol), losses, stds)


def criterion_objective(backend, prompt, t_star: float, criterion: CriterionConfig):
    """Batch objective: the criterion on preprocessed backend attention at ``t_star``."""

    def objective(z: T.Tensor) -> T.Tensor:
        out = backend.predict(z, prompt, t_star)
        return loss_combined(preprocess_attention(out.maps), criterion)

    return objective


def learn_mu(prior: GaussianPrior, backend, criterion: CriterionConfig, prompt, config: OptimConfig,
             rng: np.random.Generator) -> OptimResult:
    """Learn the prior mean with the covariance held at its current value."""
    return optimize_prior(prior, criterion_objective(backend, prompt, prior.t_star, criterion),
                          config, rng, learn_cov=False)


def learn_mu_sigma(prior: GaussianPrior, backend, criterion: CriterionConfig, prompt, config: OptimConfig,
                   rng: np.random.Generator, freeze_cov: bool = False) -> OptimResult:
    """Learn mean and Cholesky factor jointly; ``freeze_cov`` keeps the factor fixed."""
    if not prior.cov.learnable:
        raise ValueError("learn_mu_sigma needs a learnable covariance kind")
    return optimize_prior(prior, criterion_objective(backend, prompt, prior.t_star, criterion),
                          config, rng, learn_cov=not freeze_cov)


def sample_prior(prior: GaussianPrior, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` latents ``a * mu + L eps``; returns ``n x C x H x W``."""
    if n < 1:
        raise ValueError("need at least one sample")
    eps = T.Tensor(rng.standard_normal((n,) + prior.shape))
    chol = None if prior.chol is None else T.Tensor(prior.chol)
    z = T.add(T.scale(T.Tensor(prior.mu), prior.a), apply_chol(prior.cov, chol, eps, prior.b))
    return z.numpy()
