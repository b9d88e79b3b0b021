"""Exact posterior-mean backend over a prototype library."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..schedule import Schedule, VP
from .attention import AttentionMaps, RAW
from .scenes import PromptEntry, PromptSpec, PrototypeLibrary


@dataclass(frozen=True)
class BackendOutput:
    """Prediction (eps or v), raw attention maps and the implied clean estimate."""

    prediction: T.Tensor
    maps: AttentionMaps
    z0_hat: T.Tensor
    weights: T.Tensor | None = None


class AnalyticBackend:
    """Posterior mean of a discrete prototype prior under the forward process.

    Inputs may be a single latent ``C x H x W`` or a batch ``B x C x H x W``;
    every output keeps the same leading layout.
    """

    kind = "analytic"

    def __init__(self, library: PrototypeLibrary, schedule: Schedule):
        self.library = library
        self.schedule = schedule
        self._cache: dict[str, tuple] = {}
        self._uncond: PromptEntry | None = None

    def _tables(self, entry: PromptEntry):
        key = entry.prompt.prompt_id
        if key not in self._cache:
            protos = entry.prototypes.reshape(len(entry.prototypes), -1)
            self._cache[key] = (protos, np.ascontiguousarray(protos.T),
                                (protos * protos).sum(axis=1), entry.log_weights)
        return self._cache[key]

    def predict(self, z_t, prompt: PromptSpec, t: float, unconditional: bool = False) -> BackendOutput:
        z = T.as_tensor(z_t)
        single = z.ndim == 3
        if single:
            z = T.reshape(z, (1,) + z.shape)
        if z.shape[1:] != self.library.shape:
            raise T.ShapeError(f"latent shape {z.shape[1:]} does not match library shape {self.library.shape}")
        if unconditional:
            if self._uncond is None:
                self._uncond = self.library.unconditional()
            entry = self._uncond
        else:
            entry = self.library.entry(prompt)
        out = analytic_predict(entry, self.library.attention_templates(prompt.entities), z,
                               self.schedule, t, self._tables(entry))
        if single:
            return BackendOutput(T.reshape(out.prediction, out.prediction.shape[1:]),
                                 AttentionMaps(T.reshape(out.maps.values, out.maps.values.shape[1:]), RAW),
                                 T.reshape(out.z0_hat, out.z0_hat.shape[1:]),
                                 T.reshape(out.weights, out.weights.shape[1:]))
        return out


def posterior_weights(entry_tables, z_flat: T.Tensor, a: float, b: float) -> T.Tensor:
    protos, protos_t, sq, logw = entry_tables
    coef = a / (b * b)
    logits = T.add(T.scale(T.matmul(z_flat, protos_t), coef), logw - 0.5 * a * coef * sq)
    return T.softmax(logits, axis=-1)


def analytic_predict(entry: PromptEntry, signatures: np.ndarray, z_t: T.Tensor, schedule: Schedule,
                     t: float, tables=None) -> BackendOutput:
    """Batched analytic prediction for ``z_t`` of shape ``B x C x H x W``.

    Args:
        entry: Prototype set and prior weights of the prompt.
        signatures: ``S x C`` channel signatures of the prompt's entities.
        z_t: Noised latents.
        schedule: Forward process in use.
        t: Current time.
        tables: Optional precomputed ``(protos, protos.T, norms, log_weights)``.
    """
    a, b = schedule.coefficients(t)
    if b == 0.0:
        raise ZeroDivisionError(f"posterior is degenerate at t={t} (b=0)")
    if tables is None:
        protos = entry.prototypes.reshape(len(entry.prototypes), -1)
        tables = (protos, np.ascontiguousarray(protos.T), (protos * protos).sum(axis=1), entry.log_weights)
    bsz, c, h, w = z_t.shape
    z_flat = T.reshape(z_t, (bsz, c * h * w))
    weights = posterior_weights(tables, z_flat, a, b)
    z0_flat = T.matmul(weights, tables[0])
    z0 = T.reshape(z0_flat, (bsz, c, h, w))
    scale = a if schedule.kind == VP else a + b
    pred = T.scale(T.sub(z_t, T.scale(z0, scale)), 1.0 / b)
    corr = T.matmul(signatures, T.reshape(z0, (bsz, c, h * w)))
    raw = T.reshape(T.clamp_min(corr, 0.0), (bsz, len(signatures), h, w))
    return BackendOutput(pred, AttentionMaps(raw, RAW), z0, weights)
