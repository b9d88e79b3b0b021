"""Generation pipelines: vanilla, gradient-guided, and prior-learning variants."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as streams
from . import tensor as T
from .backend.attention import preprocess_attention
from .backend.scenes import PromptSpec
from .criterion import BBOX, COMBINED, CriterionConfig, criterion_for, loss_combined
from .optim import (CovSpec, GaussianPrior, OptimConfig, init_prior, optimize_prior,
                    criterion_objective, sample_prior)
from .schedule import FLOW, Schedule, solver_step

METHODS = ("vanilla", "gsn", "saga", "saga-uni", "saga-sigma", "saga-uni-sigma", "saga-plus",
           "saga-sigma-plus", "saga-bbox", "saga-plus-bbox")


@dataclass(frozen=True)
class PipelineConfig:
    """Method choice plus the prior timestep, guidance schedule and cfg scale.

    ``step_index`` and ``cutoff`` default to schedule-dependent values when
    left as ``None``.
    """

    method: str = "vanilla"
    step_index: int | None = None
    cutoff: int | None = None
    guidance_lr: float = 20.0
    cfg: float = 1.0
    n_samples: int = 1
    cov: CovSpec = field(default_factory=CovSpec)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.guidance_lr < 0:
            raise ValueError("guidance lr must be nonnegative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")

    @property
    def learns_prior(self) -> bool:
        return self.method.startswith("saga")

    @property
    def learns_cov(self) -> bool:
        return "sigma" in self.method

    @property
    def guided(self) -> bool:
        return self.method == "gsn" or "plus" in self.method

    @property
    def unique(self) -> bool:
        return "uni" in self.method

    @property
    def criterion_kind(self) -> str:
        return BBOX if "bbox" in self.method else COMBINED


def default_step_index(schedule: Schedule) -> int:
    return 5 if schedule.kind == FLOW else 10


def resolve(config: PipelineConfig, schedule: Schedule) -> tuple[int, int]:
    """Return ``(step_index, cutoff)`` after defaults and range checks."""
    n = len(schedule.grid)
    p = default_step_index(schedule) if config.step_index is None else config.step_index
    cut = n // 2 if config.cutoff is None else config.cutoff
    if not 0 <= p < n:
        raise ValueError(f"step index {p} outside the {n}-point grid")
    if not 0 < cut <= n:
        raise ValueError(f"guidance cutoff {cut} outside (0, {n}]")
    return p, cut


@dataclass
class GenerationRecord:
    prompt_id: str
    seed: int
    method: str
    sample: int
    z0: np.ndarray
    t_star: float | None
    step_index: int | None
    prior: dict | None
    criterion_trace: list[float]
    solver_calls: int
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        """Lossless JSON-ready payload; wall time is kept out on purpose."""
        return {
            "prompt": self.prompt_id,
            "seed": self.seed,
            "method": self.method,
            "sample": self.sample,
            "t_star": self.t_star,
            "step_index": self.step_index,
            "prior": self.prior,
            "criterion_trace": [float(v) for v in self.criterion_trace],
            "solver_calls": self.solver_calls,
            "shape": list(self.z0.shape),
            "z0": [float(v) for v in self.z0.ravel()],
        }


class Pipeline:
    """Shared chain machinery for one (schedule, backend) pair."""

    def __init__(self, schedule: Schedule, backend, optim: OptimConfig | None = None):
        self.schedule = schedule
        self.backend = backend
        self.optim = optim or OptimConfig()
        self.steps = schedule.steps()
        self.optimizer_calls = 0

    # -- building blocks ---------------------------------------------------------

    def _predict(self, z: np.ndarray, prompt: PromptSpec, t: float, cfg: float) -> np.ndarray:
        cond = self.backend.predict(z, prompt, t).prediction.data
        if cfg == 1.0:
            return cond
        uncond = self.backend.predict(z, prompt, t, unconditional=True).prediction.data
        return cfg * cond + (1.0 - cfg) * uncond

    def criterion_value(self, z: np.ndarray, prompt: PromptSpec, t: float, crit: CriterionConfig) -> float:
        out = self.backend.predict(z, prompt, t)
        return loss_combined(preprocess_attention(out.maps), crit).item()

    def criterion_grad(self, z: np.ndarray, prompt: PromptSpec, t: float,
                       crit: CriterionConfig) -> tuple[float, np.ndarray]:
        leaf = T.Tensor(z, requires_grad=True)
        loss = loss_combined(preprocess_attention(self.backend.predict(leaf, prompt, t).maps), crit)
        loss.backward()
        g = leaf.grad if leaf.grad is not None else np.zeros_like(z)
        return loss.item(), np.array(g)

    def denoise(self, z: np.ndarray, prompt: PromptSpec, start: int, stop: int, solver_rng,
                crit: CriterionConfig, cfg: float = 1.0, guide_from: int | None = None,
                cutoff: int = 0, guidance_lr: float = 0.0, trace: list | None = None) -> tuple[np.ndarray, int]:
        """Run grid steps ``start .. stop-1``; guidance applies on ``guide_from <= i < cutoff``."""
        calls = 0
        for i in range(start, stop):
            t, t_next = self.steps[i]
            guide = guide_from is not None and guide_from <= i < cutoff and guidance_lr > 0.0
            if guide:
                value, g = self.criterion_grad(z, prompt, t, crit)
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite guidance gradient at step {i}")
                z = z - guidance_lr * (1.0 - i / cutoff) * g
            elif trace is not None:
                value = self.criterion_value(z, prompt, t, crit)
            if trace is not None:
                trace.append(value)
            z = solver_step(self.schedule, z, self._predict(z, prompt, t, cfg), t, t_next, solver_rng)
            calls += 1
        return z, calls

    def learn_prior(self, z: np.ndarray, prompt: PromptSpec, p: int, config: PipelineConfig,
                    crit: CriterionConfig, eps_rng) -> tuple[GaussianPrior, dict]:
        t_star = self.schedule.grid[p]
        a, b = self.schedule.coefficients(t_star)
        z0_hat = self.backend.predict(z, prompt, t_star).z0_hat.numpy()
        cov = config.cov if config.learns_cov else CovSpec()
        if config.learns_cov and not cov.learnable:
            cov = CovSpec("diag", cov.shared)
        prior = init_prior(z0_hat, t_star, a, b, cov)
        self.optimizer_calls += 1
        result = optimize_prior(prior, criterion_objective(self.backend, prompt, t_star, crit),
                                self.optim, eps_rng, learn_cov=config.learns_cov)
        summary = {
            "sigma_ref": result.prior.sigma_ref,
            "std_mu": float(np.std(result.prior.mu)),
            "losses": result.losses,
            "mu_std_trace": result.mu_std,
            "cov": cov.label,
        }
        return result.prior, summary

    # -- pipelines ---------------------------------------------------------------

    def generate(self, prompt: PromptSpec, config: PipelineConfig, seed: int) -> list[GenerationRecord]:
        """Run ``config.method`` for ``(prompt, seed)``; unique-prior methods emit ``n_samples`` records."""
        start = time.perf_counter()
        if config.unique:
            records = self._generate_unique(prompt, config, seed)
        elif config.learns_prior:
            records = [self._generate_saga(prompt, config, seed)]
        else:
            records = [self._generate_plain(prompt, config, seed)]
        elapsed = time.perf_counter() - start
        for r in records:
            r.wall_time = elapsed / len(records)
        return records

    def _chain_start(self, prompt: PromptSpec, seed: int) -> np.ndarray:
        shape = self.backend.library.shape if hasattr(self.backend, "library") else self.backend.shape
        return streams.stream(seed, prompt.prompt_id, streams.CHAIN).standard_normal(shape)

    def _generate_plain(self, prompt, config, seed) -> GenerationRecord:
        _, cut = resolve(config, self.schedule)
        crit = criterion_for(prompt, config.criterion_kind)
        z = self._chain_start(prompt, seed)
        solver_rng = streams.stream(seed, prompt.prompt_id, streams.SOLVER, 0)
        trace: list[float] = []
        lr = config.guidance_lr if config.guided else 0.0
        z, calls = self.denoise(z, prompt, 0, len(self.steps), solver_rng, crit, config.cfg,
                                guide_from=0, cutoff=cut, guidance_lr=lr, trace=trace)
        return GenerationRecord(prompt.prompt_id, seed, config.method, 0, z, None, None, None, trace, calls)

    def _generate_saga(self, prompt, config, seed) -> GenerationRecord:
        p, cut = resolve(config, self.schedule)
        crit = criterion_for(prompt, config.criterion_kind)
        z = self._chain_start(prompt, seed)
        solver_rng = streams.stream(seed, prompt.prompt_id, streams.SOLVER, 0)
        trace: list[float] = []
        z, calls = self.denoise(z, prompt, 0, p, solver_rng, crit, config.cfg, trace=trace)
        prior, summary = self.learn_prior(z, prompt, p, config, crit,
                                          streams.stream(seed, prompt.prompt_id, streams.PRIOR_EPS))
        z = sample_prior(prior, streams.stream(seed, prompt.prompt_id, streams.PRIOR_SAMPLE, 0), 1)[0]
        lr = config.guidance_lr if config.guided else 0.0
        z, more = self.denoise(z, prompt, p, len(self.steps), solver_rng, crit, config.cfg,
                               guide_from=p, cutoff=cut, guidance_lr=lr, trace=trace)
        return GenerationRecord(prompt.prompt_id, seed, config.method, 0, z, prior.t_star, p, summary,
                                trace, calls + more)

    def _generate_unique(self, prompt, config, seed) -> list[GenerationRecord]:
        p, cut = resolve(config, self.schedule)
        crit = criterion_for(prompt, config.criterion_kind)
        z = self._chain_start(prompt, seed)
        chain_rng = streams.stream(seed, prompt.prompt_id, streams.SOLVER, 0)
        trace: list[float] = []
        z, calls = self.denoise(z, prompt, 0, p, chain_rng, crit, config.cfg, trace=trace)
        prior, summary = self.learn_prior(z, prompt, p, config, crit,
                                          streams.stream(seed, prompt.prompt_id, streams.PRIOR_EPS))
        records = []
        for j in range(config.n_samples):
            zj = sample_prior(prior, streams.stream(seed, prompt.prompt_id, streams.PRIOR_SAMPLE, j), 1)[0]
            solver_rng = chain_rng if j == 0 else streams.stream(seed, prompt.prompt_id, streams.SOLVER, j)
            tj = list(trace)
            zj, more = self.denoise(zj, prompt, p, len(self.steps), solver_rng, crit, config.cfg,
                                    guide_from=p, cutoff=cut,
                                    guidance_lr=config.guidance_lr if config.guided else 0.0, trace=tj)
            records.append(GenerationRecord(prompt.prompt_id, seed, config.method, j, zj, prior.t_star, p,
                                            summary, tj, calls + more))
        return records


def generate_vanilla(pipeline: Pipeline, prompt, seed: int, cfg: float = 1.0) -> GenerationRecord:
    return pipeline.generate(prompt, PipelineConfig("vanilla", cfg=cfg), seed)[0]


def generate_gsn(pipeline: Pipeline, prompt, config: PipelineConfig, seed: int) -> GenerationRecord:
    return pipeline.generate(prompt, replace_method(config, "gsn"), seed)[0]


def generate_saga(pipeline: Pipeline, prompt, config: PipelineConfig, seed: int) -> GenerationRecord:
    return pipeline.generate(prompt, config, seed)[0]


def generate_saga_uni(pipeline: Pipeline, prompt, config: PipelineConfig, n: int, seed: int) -> list[GenerationRecord]:
    method = "saga-uni-sigma" if config.learns_cov else "saga-uni"
    return pipeline.generate(prompt, replace(config, method=method, n_samples=n), seed)


def generate_saga_plus(pipeline: Pipeline, prompt, config: PipelineConfig, seed: int) -> GenerationRecord:
    return pipeline.generate(prompt, config, seed)[0]


def replace_method(config: PipelineConfig, method: str) -> PipelineConfig:
    return replace(config, method=method)
