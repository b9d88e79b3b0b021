"""Toy prompts and prototype scene libraries.

A scene is a ``C x H x W`` latent holding one isotropic Gaussian blob per
entity, coloured by the entity's channel signature.  A prompt owns ``K``
prototype scenes with prior weights; these define an exact discrete
distribution of clean latents for that prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class PromptSpec:
    """Ordered entity ids with optional boxes ``(x1, y1, x2, y2)``.

    Boxes are half-open in cell units: ``x`` indexes columns, ``y`` rows.
    """

    prompt_id: str
    entities: tuple[int, ...]
    boxes: tuple[Box, ...] | None = None

    def __post_init__(self):
        ents = tuple(int(e) for e in self.entities)
        object.__setattr__(self, "entities", ents)
        if not 1 <= len(ents) <= 4:
            raise ValueError(f"prompt {self.prompt_id}: need 1 to 4 entities, got {len(ents)}")
        if len(set(ents)) != len(ents):
            raise ValueError(f"prompt {self.prompt_id}: entity ids must be distinct")
        if self.boxes is not None:
            boxes = tuple(tuple(int(v) for v in b) for b in self.boxes)
            object.__setattr__(self, "boxes", boxes)
            if len(boxes) != len(ents):
                raise ValueError(f"prompt {self.prompt_id}: need one box per entity")
            for x1, y1, x2, y2 in boxes:
                if not (x1 < x2 and y1 < y2):
                    raise ValueError(f"prompt {self.prompt_id}: degenerate box {(x1, y1, x2, y2)}")
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    if boxes_overlap(boxes[i], boxes[j]):
                        raise ValueError(f"prompt {self.prompt_id}: boxes {boxes[i]} and {boxes[j]} overlap")

    def without_boxes(self) -> "PromptSpec":
        return PromptSpec(self.prompt_id, self.entities, None)

    def to_dict(self) -> dict:
        out = {"id": self.prompt_id, "entities": list(self.entities)}
        if self.boxes is not None:
            out["boxes"] = [list(b) for b in self.boxes]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        boxes = d.get("boxes")
        return cls(str(d["id"]), tuple(d["entities"]), tuple(tuple(b) for b in boxes) if boxes else None)


def boxes_overlap(p: Box, q: Box) -> bool:
    return p[0] < q[2] and q[0] < p[2] and p[1] < q[3] and q[1] < p[3]


def box_mask(box: Box, hw: tuple[int, int]) -> np.ndarray:
    x1, y1, x2, y2 = box
    m = np.zeros(hw)
    m[max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = 1.0
    return m


def signature_templates(vocab: int, channels: int) -> np.ndarray:
    """Unit channel signatures, one row per entity.

    The first ``2 * channels`` entities use signed axis vectors, so entities on
    different axes are exactly orthogonal.  Larger vocabularies add normalized
    two-axis mixes.
    """
    rows = []
    for c in range(channels):
        e = np.zeros(channels)
        e[c] = 1.0
        rows.append(e)
    for c in range(channels):
        e = np.zeros(channels)
        e[c] = -1.0
        rows.append(e)
    for i in range(channels):
        for j in range(i + 1, channels):
            for sign in (1.0, -1.0):
                e = np.zeros(channels)
                e[i], e[j] = 1.0, sign
                rows.append(e / np.linalg.norm(e))
    if len(rows) < vocab:
        raise ValueError(f"at most {len(rows)} signatures for {channels} channels")
    return np.array(rows[:vocab])


def blob(center: tuple[float, float], hw: tuple[int, int], sigma: float) -> np.ndarray:
    """Unit-height isotropic Gaussian bump centred at ``(row, col)``."""
    ii, jj = np.meshgrid(np.arange(hw[0]), np.arange(hw[1]), indexing="ij")
    r2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2
    return np.exp(-r2 / (2.0 * sigma * sigma))


def render_scene(centers, amplitudes, signatures: np.ndarray, shape: tuple[int, int, int],
                 sigma: float) -> np.ndarray:
    """Sum of entity blobs; ``signatures`` rows align with ``centers``."""
    c, h, w = shape
    z = np.zeros(shape)
    for ctr, amp, sig in zip(centers, amplitudes, signatures):
        z += amp * sig[:, None, None] * blob(ctr, (h, w), sigma)[None]
    return z


@dataclass
class PromptEntry:
    prompt: PromptSpec
    prototypes: np.ndarray   # K x C x H x W
    log_weights: np.ndarray  # K, log prior weights
    centers: np.ndarray      # K x S x 2, (row, col)
    amplitudes: np.ndarray   # K x S
    partners: np.ndarray | None = None  # K x S, entity blended into each slot's signature
    mixing: np.ndarray | None = None    # K x S, blend weight of the partner (0 = clean)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def faithful(self, amplitude: float) -> np.ndarray:
        """Per prototype: every entity drawn with its own signature at full height."""
        ok = np.all(self.amplitudes >= amplitude, axis=1)
        if self.mixing is not None:
            ok &= np.all(self.mixing == 0.0, axis=1)
        return ok


@dataclass
class PrototypeLibrary:
    """Exact prompt-conditioned scene distributions plus entity templates."""

    templates: np.ndarray
    shape: tuple[int, int, int]
    blob_sigma: float
    amplitude: float
    entries: dict[str, PromptEntry] = field(default_factory=dict)
    attention_gain: float = 1.0

    def attention_templates(self, entities) -> np.ndarray:
        """Entity templates used for attention: signatures scaled by ``attention_gain``."""
        return self.attention_gain * self.templates[list(entities)]

    @property
    def vocab(self) -> int:
        return self.templates.shape[0]

    def entry(self, prompt) -> PromptEntry:
        pid = prompt.prompt_id if isinstance(prompt, PromptSpec) else str(prompt)
        try:
            return self.entries[pid]
        except KeyError:
            raise KeyError(f"prompt {pid!r} is not in the library") from None

    def unconditional(self) -> PromptEntry:
        """Union of every prompt's prototypes, each prompt weighted equally."""
        ids = sorted(self.entries)
        protos = np.concatenate([self.entries[i].prototypes for i in ids])
        logw = np.concatenate([self.entries[i].log_weights - math.log(len(ids)) for i in ids])
        return PromptEntry(PromptSpec("__uncond__", (0,)), protos, logw,
                           np.zeros((len(logw), 0, 2)), np.zeros((len(logw), 0)))

    def self_response(self) -> float:
        """Matched-filter peak of a full-amplitude blob on an interior cell."""
        h, w = self.shape[1:]
        scene = self.amplitude * blob((h // 2, w // 2), (h, w), self.blob_sigma)
        return float(correlate_same(scene, blob_kernel(self.blob_sigma)).max())


def blob_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(2.0 * sigma))
    k = blob((r, r), (2 * r + 1, 2 * r + 1), sigma)
    return k / np.sqrt((k * k).sum())


def correlate_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded same-size correlation over the last two axes."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x, pad)
    out = np.zeros(x.shape)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * xp[..., i:i + h, j:j + w]
    return out


def _sample_center(rng: np.random.Generator, hw: tuple[int, int], box: Box | None,
                   margin: int) -> tuple[int, int]:
    h, w = hw
    if box is None:
        return int(rng.integers(margin, h - margin)), int(rng.integers(margin, w - margin))
    x1, y1, x2, y2 = box
    return int(rng.integers(y1, y2)), int(rng.integers(x1, x2))


@dataclass(frozen=True)
class NeglectModel:
    """How often, and how, one entity of a prototype is neglected.

    ``faint`` draws the neglected entity at ``faint_amplitude`` of full height.
    ``mix`` keeps its blob at full height but blends ``mix_weight`` of a
    co-subject's signature into its own (renormalized), so the scene reads as
    the co-subject twice while every entity still owns exactly one blob.
    Single-entity prompts always use ``faint``.
    """

    rate: float = 0.0
    mode: str = "faint"
    faint_amplitude: float = 0.2
    mix_weight: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("neglect rate must lie in [0, 1]")
        if not 0.0 < self.mix_weight <= 1.0:
            raise ValueError("mix weight must lie in (0, 1]")
        if self.mode not in ("faint", "mix"):
            raise ValueError(f"unknown neglect mode {self.mode!r}")


def build_prompt_entry(prompt: PromptSpec, templates: np.ndarray, shape: tuple[int, int, int],
                       blob_sigma: float, amplitude: float, k: int, rng: np.random.Generator,
                       neglect: NeglectModel = NeglectModel(), weight_concentration: float | None = None,
                       margin: int = 1) -> PromptEntry:
    """Draw ``k`` prototypes for one prompt.

    Args:
        prompt: Entities (and optional placement boxes).
        templates: Entity channel signatures.
        shape: Latent shape ``(C, H, W)``.
        blob_sigma: Blob width in cells.
        amplitude: Peak height of a fully present entity.
        k: Number of prototypes.
        rng: Random source.
        neglect: Rate and style of per-prototype entity neglect.
        weight_concentration: Dirichlet concentration of the prior weights;
            ``None`` gives uniform weights.
        margin: Cells kept free at the border when no box is given.
    """
    if k < 1:
        raise ValueError("need at least one prototype per prompt")
    h, w = shape[1:]
    if 2 * margin >= min(h, w):
        raise ValueError("blob margin leaves no room on the grid")
    if prompt.boxes is not None:
        min_side = max(1, int(math.ceil(blob_sigma)))
        for box in prompt.boxes:
            x1, y1, x2, y2 = box
            if x2 - x1 < min_side or y2 - y1 < min_side:
                raise ValueError(f"prompt {prompt.prompt_id}: box {box} too small for blob sigma {blob_sigma}")
            if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                raise ValueError(f"prompt {prompt.prompt_id}: box {box} leaves the {h}x{w} grid")
    ents = np.array(prompt.entities)
    s = len(ents)
    protos = np.zeros((k,) + tuple(shape))
    centers = np.zeros((k, s, 2))
    amps = np.full((k, s), float(amplitude))
    partners = np.tile(ents, (k, 1))
    mixing = np.zeros((k, s))
    for i in range(k):
        taken: list[tuple[int, int]] = []
        for e in range(s):
            box = prompt.boxes[e] if prompt.boxes is not None else None
            for _ in range(1000):
                ctr = _sample_center(rng, (h, w), box, margin)
                if ctr not in taken:
                    break
            else:
                raise ValueError(f"prompt {prompt.prompt_id}: cannot place distinct blob centres")
            taken.append(ctr)
            centers[i, e] = ctr
        if neglect.rate > 0 and rng.random() < neglect.rate:
            e = int(rng.integers(s))
            if neglect.mode == "mix" and s > 1:
                others = [j for j in range(s) if j != e]
                partners[i, e] = ents[others[int(rng.integers(len(others)))]]
                mixing[i, e] = neglect.mix_weight
            else:
                amps[i, e] *= neglect.faint_amplitude
        sigs = (1.0 - mixing[i])[:, None] * templates[ents] + mixing[i][:, None] * templates[partners[i]]
        norms = np.linalg.norm(sigs, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError(f"prompt {prompt.prompt_id}: blended signatures cancel; change the mix weight")
        sigs /= norms
        protos[i] = render_scene(centers[i], amps[i], sigs, shape, blob_sigma)
    if weight_concentration is None:
        weights = np.full(k, 1.0 / k)
    else:
        weights = rng.dirichlet(np.full(k, float(weight_concentration)))
    return PromptEntry(prompt, protos, np.log(weights), centers, amps, partners, mixing)


def build_scene_dataset(vocab: int, shape: tuple[int, int, int], blob_sigma: float,
                        prompts: list[PromptSpec], k: int, rng: np.random.Generator,
                        amplitude: float = 1.0, neglect: NeglectModel = NeglectModel(),
                        weight_concentration: float | None = None, n_scenes: int = 0,
                        attention_gain: float = 1.0, margin: int = 1):
    """Build a prototype library and optionally draw sample scenes from it.

    Returns:
        ``(library, scenes)`` where ``scenes`` is a list of
        ``(prompt_id, z0)`` pairs drawn from the prompts' prior weights.
    """
    if vocab < 1:
        raise ValueError("vocabulary must be nonempty")
    templates = signature_templates(vocab, shape[0])
    lib = PrototypeLibrary(templates, tuple(int(v) for v in shape), float(blob_sigma), float(amplitude),
                           attention_gain=float(attention_gain))
    for p in prompts:
        if max(p.entities) >= vocab:
            raise ValueError(f"prompt {p.prompt_id}: entity id outside vocabulary of size {vocab}")
        if p.prompt_id in lib.entries:
            raise ValueError(f"duplicate prompt id {p.prompt_id!r}")
        lib.entries[p.prompt_id] = build_prompt_entry(
            p, templates, lib.shape, blob_sigma, amplitude, k, rng, neglect, weight_concentration, margin)
    scenes = []
    ids = [p.prompt_id for p in prompts]
    for _ in range(n_scenes):
        pid = ids[int(rng.integers(len(ids)))]
        e = lib.entries[pid]
        j = int(rng.choice(len(e.log_weights), p=e.weights / e.weights.sum()))
        scenes.append((pid, e.prototypes[j].copy()))
    return lib, scenes


def make_prompts(n: int, n_entities: int, vocab: int, rng: np.random.Generator,
                 hw: tuple[int, int] | None = None, boxes: bool = False, prefix: str = "p",
                 box_side: int | None = None) -> list[PromptSpec]:
    """Random prompts with distinct entities; optional boxes.

    By default boxes split the grid into ``n_entities`` vertical strips, each
    inset by a cell, assigned to entities in a random order.  With
    ``box_side`` they are disjoint squares of that side at random positions
    one cell clear of the border.
    """
    if boxes and hw is None:
        raise ValueError("boxes need the grid size")
    out = []
    for i in range(n):
        ents = tuple(int(e) for e in rng.choice(vocab, size=n_entities, replace=False))
        bxs = None
        if boxes and box_side is None:
            h, w = hw
            edges = np.linspace(0, w, n_entities + 1).round().astype(int)
            strips = [(int(edges[j]) + 1, 1, int(edges[j + 1]) - 1, h - 1) for j in range(n_entities)]
            order = rng.permutation(n_entities)
            bxs = tuple(strips[j] for j in order)
        elif boxes:
            bxs = _random_squares(n_entities, box_side, hw, rng)
        out.append(PromptSpec(f"{prefix}{i:03d}", ents, bxs))
    return out


def _random_squares(count: int, side: int, hw: tuple[int, int], rng: np.random.Generator) -> tuple:
    h, w = hw
    if side < 1 or side > min(h, w) - 2:
        raise ValueError(f"box side {side} does not fit a {h}x{w} grid with a one-cell border")
    for _ in range(1000):
        picked: list[tuple[int, int, int, int]] = []
        for _ in range(count):
            y = int(rng.integers(1, h - side))
            x = int(rng.integers(1, w - side))
            box = (x, y, x + side, y + side)
            if any(boxes_overlap(box, other) for other in picked):
                break
            picked.append(box)
        if len(picked) == count:
            return tuple(picked)
    raise ValueError(f"cannot place {count} disjoint boxes of side {side}")
