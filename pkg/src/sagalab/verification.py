"""Exact checks of the Gaussian approximation of noised mixture marginals.

A conditional clean distribution is modelled as a Gaussian mixture.  Pushing
it through the forward process gives another Gaussian mixture; its
moment-matched Gaussian differs from it by a total-variation error that
shrinks like ``a^3`` (``a^4`` when the mixture is symmetric) as ``a -> 0``,
because every cumulant of order ``k >= 3`` scales exactly as ``a^k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import mpmath
import numpy as np
from scipy import integrate, stats

from .schedule import FLOW, Schedule

QUAD_ABS_TOL = 1e-13
QUAD_REL_TOL = 1e-11


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture over ``d`` in {1, 2} dimensions.

    For ``d == 1`` ``means`` has shape ``(K,)`` and ``variances`` ``(K,)``;
    for ``d == 2`` they are ``(K, 2)`` and ``(K, 2, 2)``.
    """

    weights: tuple
    means: tuple
    variances: tuple
    prompt_id: str = "mixture"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if len(m) != len(w) or len(v) != len(w):
            raise ValueError("weights, means and variances must have equal length")
        if m.ndim == 1:
            if np.any(v <= 0):
                raise ValueError("component variances must be positive")
        elif m.ndim == 2 and m.shape[1] == 2 and v.shape[1:] == (2, 2):
            for cov in v:
                if np.any(np.linalg.eigvalsh(cov) <= 0):
                    raise ValueError("component covariances must be positive definite")
        else:
            raise ValueError("only 1-D and 2-D mixtures are supported")

    @property
    def dim(self) -> int:
        return 1 if np.ndim(self.means) == 1 else 2

    def arrays(self):
        return (np.asarray(self.weights, dtype=np.float64), np.asarray(self.means, dtype=np.float64),
                np.asarray(self.variances, dtype=np.float64))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mixture mean and (co)variance by the laws of total expectation and variance."""
        w, m, v = self.arrays()
        mean = np.tensordot(w, m, axes=1)
        if self.dim == 1:
            return mean, np.dot(w, v + m * m) - mean * mean
        second = np.einsum("k,kij->ij", w, v) + np.einsum("k,ki,kj->ij", w, m, m)
        return mean, second - np.outer(mean, mean)


def _noised(mix: MixtureSpec, a: float, b: float):
    w, m, v = mix.arrays()
    if mix.dim == 1:
        return w, a * m, a * a * v + b * b
    return w, a * m, a * a * v + b * b * np.eye(2)


def _gauss1(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def _gauss2(pts, mean, cov):
    inv = np.linalg.inv(cov)
    d = pts - mean
    quad = np.einsum("...i,ij,...j->...", d, inv, d)
    return np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(np.linalg.det(cov)))


def exact_marginal(mix: MixtureSpec, schedule: Schedule, t: float) -> Callable:
    """Density of ``a * z0 + b * eps`` for ``z0`` drawn from ``mix``."""
    a, b = schedule.coefficients(t)
    return marginal_at(mix, a, b)


def marginal_at(mix: MixtureSpec, a: float, b: float) -> Callable:
    w, m, v = _noised(mix, a, b)
    if mix.dim == 1:
        return lambda x: sum(wk * _gauss1(np.asarray(x, dtype=np.float64), mk, vk) for wk, mk, vk in zip(w, m, v))
    return lambda pts: sum(wk * _gauss2(np.asarray(pts, dtype=np.float64), mk, vk) for wk, mk, vk in zip(w, m, v))


def gaussian_approx(mix: MixtureSpec, schedule: Schedule, t: float) -> Callable:
    """Moment-matched Gaussian ``N(a mu, a^2 Sigma + b^2 I)``."""
    a, b = schedule.coefficients(t)
    return approx_at(mix, a, b)


def approx_at(mix: MixtureSpec, a: float, b: float) -> Callable:
    mean, var = mix.moments()
    if mix.dim == 1:
        return lambda x: _gauss1(np.asarray(x, dtype=np.float64), a * mean, a * a * var + b * b)
    cov = a * a * var + b * b * np.eye(2)
    return lambda pts: _gauss2(np.asarray(pts, dtype=np.float64), a * mean, cov)


def _window(mix: MixtureSpec, a: float, b: float, width: float = 10.0):
    w, m, v = _noised(mix, a, b)
    if mix.dim == 1:
        sd = np.sqrt(v)
        return float(np.min(m - width * sd)), float(np.max(m + width * sd)), m
    sd = np.sqrt(np.stack([np.diagonal(c) for c in v]))
    lo = np.min(m - width * sd, axis=0)
    hi = np.max(m + width * sd, axis=0)
    return lo, hi, m


def _quad(f, lo: float, hi: float, points) -> float:
    pts = sorted({float(p) for p in points if lo < p < hi})
    val, err, info, *rest = integrate.quad(f, lo, hi, points=pts or None, limit=2000,
                                          epsabs=QUAD_ABS_TOL, epsrel=QUAD_REL_TOL, full_output=1)
    if rest and err > max(1e3 * QUAD_ABS_TOL, 1e-6 * abs(val)):
        raise QuadratureError(f"quadrature did not converge: {rest[0].splitlines()[0]} (error estimate {err:.3g})")
    return float(val)


def tv_at(mix: MixtureSpec, a: float, b: float, grid: int = 256) -> float:
    """Total variation between the noised mixture and its moment-matched Gaussian."""
    p = marginal_at(mix, a, b)
    q = approx_at(mix, a, b)
    lo, hi, centres = _window(mix, a, b)
    if mix.dim == 1:
        pts = np.concatenate([centres, np.linspace(lo, hi, 41)[1:-1]])
        return 0.5 * _quad(lambda x: abs(p(x) - q(x)), lo, hi, pts)
    xs = np.linspace(lo[0], hi[0], grid)
    ys = np.linspace(lo[1], hi[1], grid)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx, gy], axis=-1)
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    return float(0.5 * np.abs(p(pts) - q(pts)).sum() * cell)


def approx_error(mix: MixtureSpec, schedule: Schedule, t: float, grid: int = 256) -> float:
    """Total-variation error of the Gaussian approximation at time ``t``.

    1-D mixtures use adaptive quadrature on a +-10 std window; 2-D mixtures
    use a ``grid x grid`` Riemann sum on the same window.
    """
    a, b = schedule.coefficients(t)
    return tv_at(mix, a, b, grid)


def approx_kl(mix: MixtureSpec, schedule: Schedule, t: float) -> float:
    """``KL(exact || approx)`` for 1-D mixtures."""
    if mix.dim != 1:
        raise ValueError("KL is only computed for 1-D mixtures")
    a, b = schedule.coefficients(t)
    p = marginal_at(mix, a, b)
    q = approx_at(mix, a, b)
    lo, hi, centres = _window(mix, a, b)

    def integrand(x):
        px = p(x)
        return 0.0 if px <= 0 else px * (np.log(px) - np.log(q(x)))

    return _quad(integrand, lo, hi, centres)


def time_for_a(schedule: Schedule, a: float) -> float:
    """Grid-free time whose signal coefficient is ``a`` (nearest integer for vp)."""
    if schedule.kind == FLOW:
        return schedule.t_max * (1.0 - a)
    ab = np.asarray(schedule.alpha_bar)
    return float(np.argmin(np.abs(np.sqrt(ab) - a)))


@dataclass(frozen=True)
class SlopeFit:
    slope: float | None
    residual: float
    exact: bool
    a_values: tuple
    errors: tuple


def fit_decay_slope(mix: MixtureSpec, schedule: Schedule, a_values: Sequence[float]) -> SlopeFit:
    """Least-squares slope of ``log TV`` against ``log a``.

    Returns an ``exact`` fit (slope ``None``) when every error vanishes.
    """
    if len(a_values) < 4:
        raise ValueError("slope fitting needs at least four a values")
    ts = [time_for_a(schedule, a) for a in a_values]
    actual = [schedule.coefficients(t)[0] for t in ts]
    errors = [approx_error(mix, schedule, t) for t in ts]
    if max(errors) < 1e-12:
        return SlopeFit(None, 0.0, True, tuple(actual), tuple(errors))
    x = np.log(actual)
    y = np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return SlopeFit(float(slope), resid, False, tuple(actual), tuple(errors))


def _mixture_cumulants(weights, means, variances, dps: int = 50) -> tuple:
    """Second to fourth cumulants of a 1-D Gaussian mixture in extended precision."""
    with mpmath.workdps(dps):
        total = mpmath.fsum(mpmath.mpf(w) for w in weights)
        raw = [mpmath.mpf(0)] * 5
        for w, m, v in zip(weights, means, variances):
            w, m, v = mpmath.mpf(w) / total, mpmath.mpf(m), mpmath.mpf(v)
            raw[1] += w * m
            raw[2] += w * (m ** 2 + v)
            raw[3] += w * (m ** 3 + 3 * m * v)
            raw[4] += w * (m ** 4 + 6 * m ** 2 * v + 3 * v ** 2)
        mu = raw[1]
        c2 = raw[2] - mu ** 2
        c3 = raw[3] - 3 * mu * raw[2] + 2 * mu ** 3
        c4 = raw[4] - 4 * mu * raw[3] + 6 * mu ** 2 * raw[2] - 3 * mu ** 4
        return c2, c3, c4 - 3 * c2 ** 2


@dataclass(frozen=True)
class CumulantCheck:
    ratio: float | None
    defined: bool
    order: int
    t: float


def cumulant_scaling_check(mix: MixtureSpec, schedule: Schedule, t: float, k: int) -> CumulantCheck:
    """Ratio ``kappa_k(z_t) / (a^k kappa_k(z0))`` from exact mixture moments."""
    if mix.dim != 1:
        raise ValueError("cumulant check is 1-D only")
    if k not in (3, 4):
        raise ValueError("cumulant order must be 3 or 4")
    a, b = schedule.coefficients(t)
    w, m, v = mix.arrays()
    base = _mixture_cumulants(w, m, v)[k - 2]
    scale = _mixture_cumulants(w, m, v)[0] ** (mpmath.mpf(k) / 2)
    if abs(base) <= mpmath.mpf(10) ** -30 * scale or a == 0.0:
        return CumulantCheck(None, False, k, float(t))
    with mpmath.workdps(50):
        a_mp, b_mp = mpmath.mpf(a), mpmath.mpf(b)
        noised = _mixture_cumulants(w, [a_mp * mi for mi in m],
                                    [a_mp ** 2 * vi + b_mp ** 2 for vi in v])[k - 2]
        ratio = noised / (a_mp ** k * base)
    return CumulantCheck(float(ratio), True, k, float(t))


def sample_mixture(mix: MixtureSpec, n: int, rng: np.random.Generator, a: float = 1.0, b: float = 0.0) -> np.ndarray:
    """``n`` draws of ``a * z0 + b * eps`` (1-D)."""
    w, m, v = mix.arrays()
    comp = rng.choice(len(w), size=n, p=w)
    z0 = m[comp] + np.sqrt(v[comp]) * rng.standard_normal(n)
    return a * z0 + b * rng.standard_normal(n)


def monte_carlo_cumulant_ratio(mix: MixtureSpec, schedule: Schedule, t: float, k: int, n: int,
                               rng: np.random.Generator) -> float:
    """Sampled ``kappa_k(z_t)`` (unbiased k-statistic) over the exact ``a^k kappa_k(z0)``."""
    a, b = schedule.coefficients(t)
    draws = sample_mixture(mix, n, rng, a, b)
    w, m, v = mix.arrays()
    base = float(_mixture_cumulants(w, m, v)[k - 2])
    return float(stats.kstat(draws, k)) / (a ** k * base)


ASYMMETRIC = MixtureSpec((0.3, 0.7), (-3.0, 1.3), (4.0, 4.0), "asymmetric")
SYMMETRIC = MixtureSpec((0.5, 0.5), (-3.0, 3.0), (3.0, 3.0), "symmetric")
SKEWED = MixtureSpec((0.9, 0.1), (0.0, 4.0), (0.25, 0.25), "skewed")
SINGLE = MixtureSpec((1.0,), (0.7,), (0.4,), "single")

MIXTURES = {m.prompt_id: m for m in (ASYMMETRIC, SYMMETRIC, SKEWED, SINGLE)}
