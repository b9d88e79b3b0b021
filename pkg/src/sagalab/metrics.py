"""Template-based entity detection and the alignment, diversity and saturation scores."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .backend.scenes import PromptSpec, PrototypeLibrary, blob_kernel, correlate_same

DETECT_FRACTION = 0.5


@dataclass(frozen=True)
class Detection:
    entity: int
    centroid: tuple[float, float]  # (row, col)
    score: float


def default_threshold(library: PrototypeLibrary) -> float:
    return DETECT_FRACTION * library.self_response()


def response_maps(z0: np.ndarray, signatures: np.ndarray, blob_sigma: float) -> np.ndarray:
    """Matched-filter response per signature, shape ``S x H x W``."""
    proj = np.einsum("sc,chw->shw", signatures, np.asarray(z0, dtype=np.float64))
    return correlate_same(proj, blob_kernel(blob_sigma))


def _peaks(resp: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """3x3 non-maximum suppression; equal neighbours defer to the lowest flat index."""
    h, w = resp.shape
    pad = np.pad(resp, 1, constant_values=-np.inf)
    out = []
    for i in range(h):
        for j in range(w):
            v = resp[i, j]
            if v < threshold:
                continue
            win = pad[i:i + 3, j:j + 3]
            before = np.concatenate([win[0], win[1, :1]])
            after = np.concatenate([win[1, 2:], win[2]])
            if np.all(v > before) and np.all(v >= after):
                out.append((i, j))
    return out


def _centroid(resp: np.ndarray, i: int, j: int) -> tuple[float, float]:
    h, w = resp.shape
    rows = slice(max(i - 1, 0), min(i + 2, h))
    cols = slice(max(j - 1, 0), min(j + 2, w))
    win = np.clip(resp[rows, cols], 0.0, None)
    ii, jj = np.meshgrid(np.arange(rows.start, rows.stop), np.arange(cols.start, cols.stop), indexing="ij")
    total = win.sum()
    if total <= 0:
        return float(i), float(j)
    return float((win * ii).sum() / total), float((win * jj).sum() / total)


def detect_entities(z0: np.ndarray, library: PrototypeLibrary, entities, threshold: float | None = None) -> list[Detection]:
    """Peaks of each entity's matched-filter response at or above ``threshold``.

    Args:
        z0: Clean latent ``C x H x W``.
        library: Source of channel signatures and blob width.
        entities: Entity ids to look for.
        threshold: Minimum response; defaults to half the clean self-response.
    """
    if threshold is None:
        threshold = default_threshold(library)
    ents = list(entities)
    resp = response_maps(z0, library.templates[ents], library.blob_sigma)
    found = []
    for e, r in zip(ents, resp):
        for i, j in _peaks(r, threshold):
            found.append(Detection(int(e), _centroid(r, i, j), float(r[i, j])))
    return found


def best_detections(dets: list[Detection]) -> dict[int, Detection]:
    best: dict[int, Detection] = {}
    for d in dets:
        if d.entity not in best or d.score > best[d.entity].score:
            best[d.entity] = d
    return best


def all_detected(z0, prompt: PromptSpec, library: PrototypeLibrary, threshold: float | None = None) -> bool:
    found = {d.entity for d in detect_entities(z0, library, prompt.entities, threshold)}
    return all(e in found for e in prompt.entities)


def tiam_score(items, library: PrototypeLibrary, threshold: float | None = None) -> float:
    """Fraction of ``(prompt, z0)`` items where every prompted entity is detected."""
    items = list(items)
    if not items:
        raise ValueError("tiam_score needs at least one image")
    if threshold is None:
        threshold = default_threshold(library)
    hits = sum(all_detected(z0, p, library, threshold) for p, z0 in items)
    return hits / len(items)


def centroid_in_box(centroid: tuple[float, float], box) -> bool:
    """Cell-centre convention: box ``(x1, y1, x2, y2)`` covers rows ``y1..y2-1``."""
    x1, y1, x2, y2 = box
    r, c = centroid
    return y1 - 0.5 <= r < y2 - 0.5 and x1 - 0.5 <= c < x2 - 0.5


def box_alignment(items, library: PrototypeLibrary, threshold: float | None = None) -> float:
    """Mean over images and entities of 1 if the entity's best detection lies in its box."""
    items = list(items)
    if not items:
        raise ValueError("box_alignment needs at least one image")
    scores = []
    for prompt, z0 in items:
        if prompt.boxes is None:
            raise ValueError(f"prompt {prompt.prompt_id} has no boxes")
        best = best_detections(detect_entities(z0, library, prompt.entities, threshold))
        for e, box in zip(prompt.entities, prompt.boxes):
            scores.append(1.0 if e in best and centroid_in_box(best[e].centroid, box) else 0.0)
    return float(np.mean(scores))


def layout_diversity(groups, library: PrototypeLibrary, threshold: float | None = None) -> tuple[float, float]:
    """Mean pairwise distance between matched entity centroids.

    Args:
        groups: Iterable of groups, each a list of ``(prompt, z0)`` items for
            one prompt.
        library: Detector source.
        threshold: Detection threshold.

    Returns:
        ``(diversity, coverage)``: the mean over groups of the mean over image
        pairs, and the fraction of pairs that had at least one matched entity.
    """
    group_means = []
    pairs = covered = 0
    for group in groups:
        group = list(group)
        if len(group) < 2:
            raise ValueError("layout diversity needs groups of at least two images")
        best = [best_detections(detect_entities(z0, library, p.entities, threshold)) for p, z0 in group]
        dists = []
        for x, y in combinations(range(len(group)), 2):
            pairs += 1
            shared = [e for e in group[x][0].entities if e in best[x] and e in best[y]]
            if not shared:
                continue
            covered += 1
            dists.append(np.mean([np.hypot(best[x][e].centroid[0] - best[y][e].centroid[0],
                                           best[x][e].centroid[1] - best[y][e].centroid[1]) for e in shared]))
        if dists:
            group_means.append(float(np.mean(dists)))
    value = float(np.mean(group_means)) if group_means else 0.0
    return value, (covered / pairs if pairs else 0.0)


def saturation_stats(x: np.ndarray, sigma_ref: float) -> tuple[float, float, float, float]:
    """``(std, min, max, fraction of entries with |x| > 3 sigma_ref)``."""
    x = np.asarray(x, dtype=np.float64)
    return float(x.std()), float(x.min()), float(x.max()), float(np.mean(np.abs(x) > 3.0 * sigma_ref))
