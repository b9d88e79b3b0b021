"""Misalignment criteria over preprocessed attention maps.

All losses accept maps of shape ``(..., S, h, w)`` and return one value per
leading index, so a batch of latents is scored in a single tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import tensor as T
from .backend.attention import PREPROCESSED, AttentionMaps
from .backend.scenes import box_mask

COMBINED = "combined"
L1_ONLY = "l1-only"
L2_ONLY = "l2-only"
BBOX = "bbox-combined"
KINDS = (COMBINED, L1_ONLY, L2_ONLY, BBOX)


@dataclass(frozen=True)
class CriterionConfig:
    kind: str = COMBINED
    boxes: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown criterion kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == BBOX and not self.boxes:
            raise ValueError("bbox criterion needs a box for every subject")


def _values(maps: AttentionMaps) -> T.Tensor:
    if not isinstance(maps, AttentionMaps) or maps.stage != PREPROCESSED:
        raise ValueError("criteria are defined on preprocessed attention maps only")
    if maps.n_subjects < 1:
        raise ValueError("criterion needs at least one subject map")
    return maps.values


def loss_l1(maps: AttentionMaps) -> T.Tensor:
    """Worst subject's shortfall of its peak from 1."""
    m = _values(maps)
    peaks = T.tmax(m, axis=(-2, -1))
    return T.tmax(T.sub(1.0, peaks), axis=-1)


def _overlap(mm: T.Tensor, mn: T.Tensor) -> T.Tensor:
    inter = T.tsum(T.minimum(mm, mn), axis=(-2, -1))
    denom = T.add(T.tsum(mm, axis=(-2, -1)), T.tsum(mn, axis=(-2, -1)))
    return T.div(inter, denom)


def loss_l2(maps: AttentionMaps) -> T.Tensor:
    """Mean pairwise overlap ``sum min(Mm, Mn) / sum (Mm + Mn)``."""
    m = _values(maps)
    s = maps.n_subjects
    if s < 2:
        raise ValueError("overlap loss needs at least two subjects")
    terms = [_overlap(m[..., i, :, :], m[..., j, :, :]) for i, j in combinations(range(s), 2)]
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.scale(total, 1.0 / len(terms))


def loss_bbox(maps: AttentionMaps, boxes) -> T.Tensor:
    """Mean over subjects of ``1 - sum min(B, M) / sum (B + M)`` with ``B`` the box mask."""
    m = _values(maps)
    s = maps.n_subjects
    if boxes is None or len(boxes) != s:
        raise ValueError(f"bbox loss needs exactly one box per subject ({s})")
    hw = m.shape[-2:]
    total = None
    for i, box in enumerate(boxes):
        term = T.sub(1.0, _overlap(m[..., i, :, :], T.Tensor(box_mask(box, hw))))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / s)


def loss_combined(maps: AttentionMaps, config: CriterionConfig = CriterionConfig()) -> T.Tensor:
    """``(L1 + L2) / 2``; the bbox kind swaps in the box loss; one subject gives ``L1``."""
    if config.kind == L1_ONLY:
        return loss_l1(maps)
    if config.kind == L2_ONLY:
        return loss_l2(maps)
    l1 = loss_l1(maps)
    if config.kind == BBOX:
        return T.scale(T.add(l1, loss_bbox(maps, config.boxes)), 0.5)
    if maps.n_subjects == 1:
        return l1
    return T.scale(T.add(l1, loss_l2(maps)), 0.5)


def criterion_for(prompt, kind: str = COMBINED) -> CriterionConfig:
    """Criterion config for a prompt; the bbox kind takes the prompt's boxes."""
    if kind == BBOX:
        return CriterionConfig(BBOX, prompt.boxes)
    return CriterionConfig(kind)


def evaluate(maps: AttentionMaps, config: CriterionConfig) -> np.ndarray:
    return loss_combined(maps, config).numpy()
