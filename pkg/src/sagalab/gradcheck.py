"""Derivative checks for the autodiff ops and the full criterion composition.

Every op is checked against central differences on random instances, with
the op's output contracted against random weights so every coordinate
carries an order-one gradient.

The composition latent -> backend -> preprocessing -> criterion is checked
against a separate complex-step derivative: a plain numpy re-implementation
evaluated at ``z + i h e_j`` for all coordinates at once.  Complex-step
derivatives carry no subtractive cancellation, so coordinates with tiny
gradients stay measurable where central differences drown in roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backend.analytic import AnalyticBackend
from .backend.attention import ATTENTION_SCALE, gaussian_kernel, preprocess_attention
from .backend.scenes import NeglectModel, build_scene_dataset, make_prompts
from .criterion import loss_combined
from .schedule import Schedule, make_flow_schedule, make_vp_schedule

REL_FLOOR = 1e-12
# Composition gradients mix terms far larger than some final coordinates, so
# coordinates below ~1e-12 carry ~1e-16 absolute roundoff in any float64
# implementation; the floor keeps those from reading as relative errors.
COMPOSITION_FLOOR = 1e-10


def relative_error(ad: np.ndarray, ref: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Max over coordinates of ``|ad - ref| / (|ref| + floor)``."""
    ad = np.asarray(ad, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if ad.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - ref) / (np.abs(ref) + floor)))


@dataclass(frozen=True)
class OpCase:
    """One op under test: ``build(rng)`` returns ``(inputs, fn)`` with ``fn(*tensors) -> Tensor``."""

    name: str
    build: Callable


def _u(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away(rng, shape, gap=0.3):
    """Values with magnitude in ``[gap, 2]`` and random sign."""
    return rng.uniform(gap, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _cases() -> list[OpCase]:
    def two(op, lo_b=None):
        def build(rng):
            a = _u(rng, (3, 4))
            b = _away(rng, (3, 4)) if lo_b else _u(rng, (4,))
            return [a, b], op
        return build

    def one(op, gen=_u, shape=(3, 4)):
        def build(rng):
            return [gen(rng, shape)], op
        return build

    pos = lambda rng, shape: rng.uniform(0.3, 2.0, size=shape)
    return [
        OpCase("add", two(T.add)),
        OpCase("sub", two(T.sub)),
        OpCase("mul", two(T.mul)),
        OpCase("div", two(T.div, lo_b=True)),
        OpCase("neg", one(T.neg)),
        OpCase("scale", one(lambda x: T.scale(x, -1.7))),
        OpCase("minimum", lambda rng: ([_u(rng, (3, 4)), _u(rng, (3, 4))], T.minimum)),
        OpCase("exp", one(T.exp)),
        OpCase("log", one(T.log, pos)),
        OpCase("square", one(T.square)),
        OpCase("sqrt", one(T.sqrt, pos)),
        OpCase("clamp_min", one(lambda x: T.clamp_min(x, 0.1), _away)),
        OpCase("reshape", one(lambda x: T.reshape(x, (2, 6)))),
        OpCase("transpose", one(lambda x: T.transpose(x, (2, 0, 1)), shape=(2, 3, 4))),
        OpCase("swapaxes", one(lambda x: T.swapaxes(x, 0, 2), shape=(2, 3, 4))),
        OpCase("broadcast_to", one(lambda x: T.broadcast_to(x, (2, 3, 4)), shape=(3, 1))),
        OpCase("getitem", one(lambda x: T.getitem(x, (slice(None), np.array([0, 2, 2, 3]))))),
        OpCase("stack", lambda rng: ([_u(rng, (3, 4)), _u(rng, (3, 4))], lambda a, b: T.stack([a, b], axis=1))),
        OpCase("concat", lambda rng: ([_u(rng, (3, 4)), _u(rng, (2, 4))], lambda a, b: T.concat([a, b], axis=0))),
        OpCase("tsum", one(lambda x: T.tsum(x, axis=1, keepdims=True))),
        OpCase("mean", one(lambda x: T.mean(x, axis=(0, 2)), shape=(2, 3, 4))),
        OpCase("tmax", one(lambda x: T.tmax(x, axis=(-2, -1)), shape=(2, 3, 4))),
        OpCase("softmax", one(lambda x: T.softmax(x, axis=-1))),
        OpCase("log_softmax", one(lambda x: T.log_softmax(x, axis=0))),
        OpCase("std", one(T.std)),
        OpCase("matmul", lambda rng: ([_u(rng, (2, 3, 4)), _u(rng, (4, 5))], T.matmul)),
        OpCase("conv2d", one(lambda x: T.conv2d(x, gaussian_kernel()), shape=(2, 5, 6))),
    ]


OP_CASES = _cases()


def check_op(case: OpCase, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Worst relative error over all inputs of one random instance."""
    inputs, fn = case.build(rng)
    out_shape = fn(*[T.Tensor(x) for x in inputs]).shape
    weights = rng.uniform(0.5, 1.5, size=out_shape) * rng.choice([-1.0, 1.0], size=out_shape)
    worst = 0.0
    for k in range(len(inputs)):
        def scalar(x, k=k):
            args = [T.Tensor(v) for v in inputs]
            args[k] = x
            return T.tsum(T.mul(fn(*args), weights))
        worst = max(worst, T.grad_check(scalar, inputs[k], h))
    return worst


def run_op_suite(n_instances: int = 100, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op over ``n_instances`` random instances each."""
    out = {}
    for i, case in enumerate(OP_CASES):
        rng = np.random.default_rng([seed, i])
        out[case.name] = max(check_op(case, rng, h) for _ in range(n_instances))
    return out


# -- composition oracle --------------------------------------------------------------


def _cplx_pick(mask, a, b):
    return np.where(mask, a, b)


def _cplx_softmax(x, axis):
    shift = np.max(x.real, axis=axis, keepdims=True)
    e = np.exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def _cplx_conv_same(x, kernel):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x, pad)
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out = out + kernel[i, j] * xp[..., i:i + h, j:j + w]
    return out


def composition_reference(z, prototypes, log_weights, signatures, a, b):
    """Combined criterion for a batch of (possibly complex) latents ``N x C x H x W``.

    Written from the definitions: posterior over prototypes, posterior-mean
    clean estimate, clamped signature correlation, x100 spatial softmax,
    zero-padded 3x3 smoothing with renormalization, then ``(L1 + L2) / 2`` (``L1`` alone for one subject).  Branches follow
    the real part, which is what the complex-step derivative needs.
    """
    n, c, h, w = z.shape
    protos = prototypes.reshape(len(prototypes), -1)
    zf = z.reshape(n, -1)
    # ||z||^2 is common to every prototype and cancels in the softmax; dropping
    # it keeps exactly-zero gradient coordinates free of roundoff residue.
    logits = (log_weights[None] + (a / (b * b)) * (zf @ protos.T)
              - (a * a / (2.0 * b * b)) * (protos * protos).sum(-1)[None])
    post = _cplx_softmax(logits, axis=1)
    z0 = (post @ protos).reshape(n, c, h * w)
    corr = np.einsum("sc,ncp->nsp", signatures, z0)
    raw = _cplx_pick(corr.real > 0.0, corr, 0.0 * corr)
    soft = _cplx_softmax(ATTENTION_SCALE * raw, axis=-1).reshape(n, -1, h, w)
    smooth = _cplx_conv_same(soft, gaussian_kernel())
    maps = smooth / smooth.sum(axis=(-2, -1), keepdims=True)
    s = maps.shape[1]
    flat = maps.reshape(n, s, -1)
    peaks = np.take_along_axis(flat, flat.real.argmax(-1)[..., None], -1)[..., 0]
    short = 1.0 - peaks
    l1 = np.take_along_axis(short, short.real.argmax(-1)[:, None], -1)[:, 0]
    if s == 1:
        return l1
    terms = []
    for i in range(s):
        for j in range(i + 1, s):
            mi, mj = flat[:, i], flat[:, j]
            inter = _cplx_pick(mi.real <= mj.real, mi, mj).sum(-1)
            terms.append(inter / (mi.sum(-1) + mj.sum(-1)))
    return 0.5 * (l1 + sum(terms) / len(terms))


def complex_step_grad(z, prototypes, log_weights, signatures, a, b, h=1e-100):
    """Gradient of the reference composition by the complex step, all coordinates at once."""
    d = z.size
    batch = np.repeat(z.reshape(1, -1).astype(np.complex128), d, axis=0)
    batch[np.arange(d), np.arange(d)] += 1j * h
    vals = composition_reference(batch.reshape((d,) + z.shape), prototypes, log_weights, signatures, a, b)
    return (vals.imag / h).reshape(z.shape)


@dataclass(frozen=True)
class CompositionReport:
    instances: int            # instances whose gradient is above the roundoff floor
    max_rel_error: float      # over those instances, with COMPOSITION_FLOOR
    max_abs_error: float      # over all instances
    degenerate: int           # instances with max |gradient| below DEGENERATE_SCALE
    max_abs_error_degenerate: float
    max_value_gap: float      # |criterion value - reference value| over all instances
    worst: dict


# Below this gradient scale (a posterior collapsed to weight 1 - 1e-14, say) the
# gradient is itself a roundoff residue in both implementations.
DEGENERATE_SCALE = 1e-10


def check_composition(n_instances: int = 100, seed: int = 0, shape=(4, 8, 8), k: int = 6,
                      gain: float = 0.1, max_draws: int = 1000) -> CompositionReport:
    """Autodiff gradient of the combined criterion against the complex-step oracle.

    Instances alternate schedules and draw a random prompt, grid time and
    latent ``a m + b eps`` near a random prototype.  Draws continue until
    ``n_instances`` of them have a gradient above ``DEGENERATE_SCALE``;
    the rest are held to an absolute-error bound instead.
    """
    rng = np.random.default_rng(seed)
    prompts = make_prompts(6, 2, 8, rng) + make_prompts(2, 1, 8, rng, prefix="q")
    lib, _ = build_scene_dataset(8, shape, 1.0, prompts, k, rng, neglect=NeglectModel(0.3, "mix"),
                                 attention_gain=gain)
    schedules: list[Schedule] = [make_vp_schedule(), make_flow_schedule()]
    backends = [AnalyticBackend(lib, s) for s in schedules]
    worst_err, worst_gap, worst_abs, max_abs, worst = 0.0, 0.0, 0.0, 0.0, {}
    counted = degenerate = 0
    for i in range(max_draws):
        if counted >= n_instances:
            break
        sch, be = schedules[i % 2], backends[i % 2]
        prompt = prompts[int(rng.integers(len(prompts)))]
        t = sch.grid[int(rng.integers(len(sch.grid)))]
        a, b = sch.coefficients(t)
        entry = lib.entry(prompt)
        z = a * entry.prototypes[int(rng.integers(k))] + b * rng.standard_normal(shape)

        def f(x):
            return loss_combined(preprocess_attention(be.predict(x, prompt, t).maps))

        value, g = T.grad(f, z)
        sigs = lib.attention_templates(prompt.entities)
        ref_val = composition_reference(z[None], entry.prototypes, entry.log_weights, sigs, a, b)[0].real
        ref = complex_step_grad(z, entry.prototypes, entry.log_weights, sigs, a, b)
        worst_gap = max(worst_gap, abs(value - ref_val))
        abs_err = float(np.max(np.abs(g - ref)))
        max_abs = max(max_abs, abs_err)
        if np.max(np.abs(ref)) < DEGENERATE_SCALE:
            degenerate += 1
            worst_abs = max(worst_abs, abs_err)
            continue
        counted += 1
        err = relative_error(g, ref, COMPOSITION_FLOOR)
        if err >= worst_err:
            worst_err = err
            worst = {"schedule": sch.kind, "t": float(t), "prompt": prompt.prompt_id, "value": value}
    if counted < n_instances:
        raise RuntimeError(f"only {counted} of {n_instances} instances had a measurable gradient")
    return CompositionReport(counted, worst_err, max_abs, degenerate, worst_abs, worst_gap, worst)
