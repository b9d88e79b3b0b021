"""Attention-map containers and the smoothing pipeline applied before criteria."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T

RAW = "raw"
PREPROCESSED = "preprocessed"

ATTENTION_SCALE = 100.0
SMOOTH_SIZE = 3
SMOOTH_SIGMA = 0.5


@dataclass(frozen=True)
class AttentionMaps:
    """Per-entity spatial maps of shape ``(..., S, h, w)`` plus a stage tag."""

    values: T.Tensor
    stage: str = RAW

    @property
    def n_subjects(self) -> int:
        return self.values.shape[-3]


def gaussian_kernel(size: int = SMOOTH_SIZE, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = gaussian_kernel()


def preprocess_attention(raw: AttentionMaps, scale: float = ATTENTION_SCALE) -> AttentionMaps:
    """Scale, spatial softmax, 3x3 Gaussian smoothing, renormalize to unit sum."""
    if raw.stage != RAW:
        raise ValueError("preprocess_attention expects raw maps")
    x = raw.values
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    flat = T.reshape(x, lead + (h * w,))
    soft = T.reshape(T.softmax(T.scale(flat, scale), axis=-1), lead + (h, w))
    smooth = T.conv2d(soft, _KERNEL)
    total = T.tsum(smooth, axis=(-2, -1), keepdims=True)
    return AttentionMaps(T.div(smooth, total), PREPROCESSED)
