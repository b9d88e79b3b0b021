"""Forward-process schedules, sampling grids and reverse solver steps.

Both schedule kinds share the interpolation ``z_t = a(t) * z0 + b(t) * eps``.
The variance-preserving kind takes ``a`` from cumulative products of a linear
beta ramp; the linear-flow kind uses ``a = 1 - t/t_max`` and ``b = t/t_max``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VP = "vp-diffusion"
FLOW = "linear-flow"

DDPM50 = tuple(float(t) for t in range(981, 0, -20))

FLOW28 = (
    1000.0, 987.3806, 974.1077, 960.1293, 945.3875, 929.8179, 913.3489,
    895.9003, 877.3818, 857.6923, 836.7166, 814.3247, 790.3682, 764.6771,
    737.0558, 707.2785, 675.0823, 640.1602, 602.1505, 560.625, 515.0720,
    464.8760, 409.2888, 347.3926, 278.0487, 199.8269, 110.9057, 8.9285,
)


@dataclass(frozen=True)
class Schedule:
    """Coefficient source plus a descending sampling grid.

    The sampler visits ``grid[0] -> grid[1] -> ... -> grid[-1] -> 0``, so a grid of
    ``n`` points costs exactly ``n`` solver calls.
    """

    kind: str
    t_max: int
    grid: tuple[float, ...]
    alpha_bar: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def prediction(self) -> str:
        return "eps" if self.kind == VP else "v"

    def coefficients(self, t: float) -> tuple[float, float]:
        """Return ``(a(t), b(t))``."""
        t = float(t)
        if not 0.0 <= t <= self.t_max:
            raise ValueError(f"t={t} outside [0, {self.t_max}]")
        if self.kind == FLOW:
            s = t / self.t_max
            return 1.0 - s, s
        idx = int(round(t))
        if abs(idx - t) > 1e-9:
            raise ValueError(f"vp schedule needs integer timesteps, got {t}")
        ab = float(self.alpha_bar[idx])
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))

    def a(self, t: float) -> float:
        return self.coefficients(t)[0]

    def b(self, t: float) -> float:
        return self.coefficients(t)[1]

    def steps(self) -> list[tuple[float, float]]:
        """Consecutive ``(t, t_next)`` pairs covering the grid and the final step to 0."""
        ts = list(self.grid) + [0.0]
        return list(zip(ts[:-1], ts[1:]))

    def grid_position(self, t: float) -> int:
        for i, g in enumerate(self.grid):
            if abs(g - t) < 1e-9:
                return i
        raise ValueError(f"t={t} is not on the sampling grid")


def _check_grid(grid: Sequence[float], t_max: int) -> tuple[float, ...]:
    g = tuple(float(t) for t in grid)
    if not g:
        raise ValueError("sampling grid is empty")
    if any(t < 0 or t > t_max for t in g):
        raise ValueError(f"sampling grid must lie in [0, {t_max}]")
    if any(x <= y for x, y in zip(g[:-1], g[1:])):
        raise ValueError("sampling grid must be strictly decreasing")
    return g


def _uniform_grid(n: int, t_max: int, integer: bool) -> tuple[float, ...]:
    if n < 1 or n > t_max:
        raise ValueError(f"uniform grid size must be in [1, {t_max}], got {n}")
    ts = [t_max * (1.0 - i / n) for i in range(n)]
    if integer:
        ts = [float(round(t)) for t in ts]
    return tuple(ts)


def resolve_grid(grid, kind: str, t_max: int) -> tuple[float, ...]:
    """Turn a preset name, ``uniform:<n>`` or an explicit list into grid values."""
    if isinstance(grid, str):
        if grid == "ddpm50":
            values = DDPM50
        elif grid == "flow28":
            values = FLOW28
        elif grid.startswith("uniform:"):
            try:
                n = int(grid.split(":", 1)[1])
            except ValueError:
                raise ValueError(f"bad uniform grid spec {grid!r}") from None
            values = _uniform_grid(n, t_max, integer=(kind == VP))
        else:
            raise ValueError(f"unknown grid preset {grid!r}")
    else:
        values = grid
    return _check_grid(values, t_max)


def make_vp_schedule(t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                     grid="ddpm50") -> Schedule:
    """Variance-preserving schedule with a linear beta ramp.

    Args:
        t_max: Number of training timesteps.
        beta_start: First beta of the ramp.
        beta_end: Last beta of the ramp.
        grid: Preset name, ``uniform:<n>`` or an explicit descending list.
    """
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if t_max < 1:
        raise ValueError("t_max must be positive")
    betas = np.linspace(beta_start, beta_end, t_max)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha_bar.flags.writeable = False
    return Schedule(VP, int(t_max), resolve_grid(grid, VP, t_max), alpha_bar)


def make_flow_schedule(t_max: int = 1000, grid="flow28") -> Schedule:
    """Linear flow schedule ``a = 1 - t/t_max``, ``b = t/t_max``."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    return Schedule(FLOW, int(t_max), resolve_grid(grid, FLOW, t_max))


def make_schedule(kind: str, t_max: int = 1000, grid=None, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> Schedule:
    if kind in (VP, "vp"):
        return make_vp_schedule(t_max, beta_start, beta_end, grid or "ddpm50")
    if kind in (FLOW, "flow"):
        return make_flow_schedule(t_max, grid or "flow28")
    raise ValueError(f"unknown schedule kind {kind!r}")


def diffuse(schedule: Schedule, z0, t: float, eps):
    """Return ``a(t) * z0 + b(t) * eps``."""
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"diffuse: z0 shape {np.shape(z0)} and eps shape {np.shape(eps)} differ")
    a, b = schedule.coefficients(t)
    return a * z0 + b * eps


def estimate_z0(schedule: Schedule, z_t, prediction, t: float):
    """Expected clean latent from a noise (vp) or velocity (flow) prediction.

    Works on numpy arrays and on tape tensors alike.
    """
    a, b = schedule.coefficients(t)
    denom = a if schedule.kind == VP else a + b
    if denom == 0.0:
        raise ZeroDivisionError(f"z0 estimator is singular at t={t}")
    return (z_t - b * prediction) * (1.0 / denom)


def prediction_from_z0(schedule: Schedule, z_t, z0_hat, t: float):
    """Inverse of :func:`estimate_z0`: the prediction implied by a z0 estimate."""
    a, b = schedule.coefficients(t)
    if b == 0.0:
        raise ZeroDivisionError(f"prediction is undefined at t={t} (b=0)")
    scale = a if schedule.kind == VP else a + b
    return (z_t - scale * z0_hat) * (1.0 / b)


def solver_step(schedule: Schedule, z_t: np.ndarray, prediction: np.ndarray, t: float,
                t_next: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """One reverse step from ``t`` to ``t_next``.

    vp: DDPM ancestral step between arbitrary grid points, with injected noise
    unless ``t_next == 0``. flow: Euler step in normalized time.

    Args:
        schedule: The schedule in use.
        z_t: Current latent.
        prediction: Backend output (eps for vp, v for flow) at ``(z_t, t)``.
        t: Current time.
        t_next: Target time, strictly smaller than ``t``.
        rng: Source of injected noise; required for vp steps with ``t_next > 0``.
    """
    if not t_next < t:
        raise ValueError(f"solver_step needs t_next < t, got t={t}, t_next={t_next}")
    z_t = np.asarray(z_t, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if schedule.kind == FLOW:
        ds = (t_next - t) / schedule.t_max
        return z_t + ds * prediction

    ab_t = float(schedule.alpha_bar[int(round(t))])
    ab_n = float(schedule.alpha_bar[int(round(t_next))])
    alpha = ab_t / ab_n
    beta = 1.0 - alpha
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * prediction) / np.sqrt(ab_t)
    mean = (np.sqrt(ab_n) * beta / (1.0 - ab_t)) * z0_hat \
        + (np.sqrt(alpha) * (1.0 - ab_n) / (1.0 - ab_t)) * z_t
    if t_next <= 0:
        return mean
    if rng is None:
        raise ValueError("vp solver step needs an rng for injected noise")
    var = (1.0 - ab_n) / (1.0 - ab_t) * beta
    return mean + np.sqrt(var) * rng.standard_normal(z_t.shape)
