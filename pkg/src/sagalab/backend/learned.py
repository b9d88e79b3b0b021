"""A tiny trainable cross-attention denoiser over toy scenes.

Each grid cell is a token (its C channel values, linearly embedded) plus a
sinusoidal time embedding.  One multi-head cross-attention layer reads the
prompt tokens: a learned null token followed by one learned embedding per
entity.  A residual two-layer MLP maps every cell back to C outputs.  The
raw attention map of an entity is its attention column averaged over heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..schedule import VP, Schedule, diffuse, estimate_z0
from .analytic import BackendOutput
from .attention import RAW, AttentionMaps
from .scenes import PromptSpec

PARAM_NAMES = ("embed", "w_in", "b_in", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")


class TrainingError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class LearnedWeights:
    """Parameters plus the architecture and schedule they were trained for."""

    params: dict[str, np.ndarray]
    vocab: int
    shape: tuple[int, int, int]
    width: int = 16
    heads: int = 2
    hidden: int = 32
    schedule_kind: str = VP
    t_max: int = 1000

    @property
    def null_token(self) -> int:
        return self.vocab

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class TrainResult:
    weights: LearnedWeights
    losses: list[float]       # mean training loss per epoch
    initial_loss: float       # loss of the untrained model on the first batch
    val_loss: float | None = None
    baseline: float | None = None
    extra: dict = field(default_factory=dict)


def init_weights(vocab: int, shape: tuple[int, int, int], rng: np.random.Generator, width: int = 16,
                 heads: int = 2, hidden: int = 32, schedule_kind: str = VP, t_max: int = 1000) -> LearnedWeights:
    """Random weights; the output layer is zero so the untrained model predicts 0."""
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")
    c = shape[0]

    def dense(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)

    params = {
        "embed": rng.standard_normal((vocab + 1, width)),
        "w_in": dense(c, width),
        "b_in": np.zeros(width),
        "wq": dense(width, width),
        "wk": dense(width, width),
        "wv": dense(width, width),
        "wo": dense(width, width),
        "w1": dense(width, hidden),
        "b1": np.zeros(hidden),
        "w2": np.zeros((hidden, c)),
        "b2": np.zeros(c),
    }
    return LearnedWeights(params, vocab, tuple(int(v) for v in shape), width, heads, hidden, schedule_kind, t_max)


def time_embedding(t: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal embedding of shape ``len(t) x width``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


def prompt_tokens(weights: LearnedWeights, prompt: PromptSpec | None) -> list[int]:
    """Null token first, then the prompt's entities; ``None`` gives the null token alone."""
    if prompt is None:
        return [weights.null_token]
    bad = [e for e in prompt.entities if e >= weights.vocab]
    if bad:
        raise ValueError(f"prompt {prompt.prompt_id}: entities {bad} outside the trained vocabulary "
                         f"of size {weights.vocab}")
    return [weights.null_token] + list(prompt.entities)


def learned_forward(weights: LearnedWeights, params: dict, z_t: T.Tensor, tokens: list[int], t):
    """Batched forward pass.

    Args:
        weights: Architecture metadata.
        params: Parameter tensors (tape leaves when training).
        z_t: Latents ``B x C x H x W``.
        tokens: Prompt token ids, null token first.
        t: Scalar time or one time per batch row.

    Returns:
        ``(prediction B x C x H x W, attention B x HW x len(tokens))``.
    """
    bsz, c, h, w = z_t.shape
    d, nh = weights.width, weights.heads
    dh = d // nh
    n = h * w
    ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,))
    temb = time_embedding(ts, d).reshape(bsz, 1, d)
    cells = T.transpose(T.reshape(z_t, (bsz, c, n)), (0, 2, 1))
    x = T.add(T.add(T.matmul(cells, params["w_in"]), params["b_in"]), temb)
    ctx = T.getitem(params["embed"], np.asarray(tokens))
    m = len(tokens)
    q = T.transpose(T.reshape(T.matmul(x, params["wq"]), (bsz, n, nh, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(ctx, params["wk"]), (m, nh, dh)), (1, 2, 0))
    v = T.transpose(T.reshape(T.matmul(ctx, params["wv"]), (m, nh, dh)), (1, 0, 2))
    attn = T.softmax(T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh)), axis=-1)
    mixed = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (bsz, n, d))
    hid = T.add(x, T.matmul(mixed, params["wo"]))
    act = T.clamp_min(T.add(T.matmul(hid, params["w1"]), params["b1"]), 0.0)
    out = T.add(T.matmul(act, params["w2"]), params["b2"])
    pred = T.reshape(T.transpose(out, (0, 2, 1)), (bsz, c, h, w))
    return pred, T.mean(attn, axis=1)


def learned_predict(weights: LearnedWeights, z_t, prompt: PromptSpec | None, t: float,
                    schedule: Schedule, params: dict | None = None) -> BackendOutput:
    """Prediction, raw entity attention and clean estimate for ``B x C x H x W`` latents."""
    if schedule.kind != weights.schedule_kind:
        raise ValueError(f"weights were trained for {weights.schedule_kind}, not {schedule.kind}")
    z = T.as_tensor(z_t)
    if tuple(z.shape[1:]) != weights.shape:
        raise T.ShapeError(f"latent shape {z.shape[1:]} does not match trained shape {weights.shape}")
    if params is None:
        params = {k: T.Tensor(v) for k, v in weights.params.items()}
    tokens = prompt_tokens(weights, prompt)
    pred, attn = learned_forward(weights, params, z, tokens, t)
    bsz, _, h, w = z.shape
    ent = T.getitem(attn, (slice(None), slice(None), slice(1, None)))
    maps = T.reshape(T.transpose(ent, (0, 2, 1)), (bsz, len(tokens) - 1, h, w))
    return BackendOutput(pred, AttentionMaps(maps, RAW), estimate_z0(schedule, z, pred, t))


class LearnedBackend:
    """Backend wrapper with the same ``predict`` contract as the analytic backend."""

    kind = "learned"

    def __init__(self, weights: LearnedWeights, schedule: Schedule):
        if schedule.kind != weights.schedule_kind:
            raise ValueError(f"weights were trained for {weights.schedule_kind}, not {schedule.kind}")
        self.weights = weights
        self.schedule = schedule
        self.shape = weights.shape
        self._params = {k: T.Tensor(v) for k, v in weights.params.items()}

    def predict(self, z_t, prompt: PromptSpec, t: float, unconditional: bool = False) -> BackendOutput:
        z = T.as_tensor(z_t)
        single = z.ndim == 3
        if single:
            z = T.reshape(z, (1,) + z.shape)
        out = learned_predict(self.weights, z, None if unconditional else prompt, t, self.schedule, self._params)
        if not single:
            return out
        return BackendOutput(T.reshape(out.prediction, out.prediction.shape[1:]),
                             AttentionMaps(T.reshape(out.maps.values, out.maps.values.shape[1:]), RAW),
                             T.reshape(out.z0_hat, out.z0_hat.shape[1:]))


def _target(schedule: Schedule, z0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return eps if schedule.kind == VP else eps - z0


def _batch_loss(weights, params, schedule, batch, rng, uncond_rate):
    """Mean over samples of the summed squared error; samples run one at a time."""
    total = None
    for prompt, z0 in batch:
        t = int(rng.integers(1, schedule.t_max + 1))
        eps = rng.standard_normal(z0.shape)
        z_t = diffuse(schedule, z0, t, eps)[None]
        drop = uncond_rate > 0 and rng.random() < uncond_rate
        tokens = prompt_tokens(weights, None if drop else prompt)
        pred, _ = learned_forward(weights, params, T.Tensor(z_t), tokens, t)
        err = T.tsum(T.square(T.sub(pred, _target(schedule, z0, eps)[None])))
        total = err if total is None else T.add(total, err)
    return T.scale(total, 1.0 / len(batch))


def denoising_loss(weights: LearnedWeights, dataset, schedule: Schedule, rng: np.random.Generator) -> float:
    """Average summed squared error over ``dataset`` with fresh ``(t, eps)`` draws."""
    params = {k: T.Tensor(v) for k, v in weights.params.items()}
    return _batch_loss(weights, params, schedule, list(dataset), rng, 0.0).item()


def train_toy_backend(dataset, schedule: Schedule, epochs: int, lr: float, batch: int, seed: int,
                      vocab: int | None = None, width: int = 16, heads: int = 2, hidden: int = 32,
                      uncond_rate: float = 0.1, validation=None) -> TrainResult:
    """Train the denoiser with Adam on uniformly drawn timesteps.

    Args:
        dataset: List of ``(PromptSpec, z0)`` pairs.
        schedule: Forward process; fixes the target (eps or ``eps - z0``).
        epochs: Passes over the dataset.
        lr: Adam step size.
        batch: Samples per update.
        seed: Seeds initialization, shuffling and noise draws.
        vocab: Vocabulary size; defaults to one past the largest entity id.
        width: Token width.
        heads: Attention heads.
        hidden: MLP hidden width.
        uncond_rate: Probability of replacing a prompt by the null token.
        validation: Optional held-out ``(prompt, z0)`` pairs scored after training.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    if epochs < 0 or batch < 1 or lr <= 0:
        raise ValueError("need epochs >= 0, batch >= 1 and a positive learning rate")
    if vocab is None:
        vocab = 1 + max(max(p.entities) for p, _ in dataset)
    rng = np.random.default_rng(seed)
    shape = tuple(np.shape(dataset[0][1]))
    weights = init_weights(vocab, shape, rng, width, heads, hidden, schedule.kind, schedule.t_max)
    for p, _ in dataset:
        prompt_tokens(weights, p)
    params = weights.params
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, tiny = 0.9, 0.999, 1e-8
    step = 0
    initial = None
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), batch):
            chunk = [dataset[i] for i in order[start:start + batch]]
            leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = _batch_loss(weights, leaves, schedule, chunk, rng, uncond_rate)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, update {step}")
            if initial is None:
                initial = value
            loss.backward()
            step += 1
            new = {}
            for k, v in params.items():
                g = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v)
                m1[k] = beta1 * m1[k] + (1 - beta1) * g
                m2[k] = beta2 * m2[k] + (1 - beta2) * g * g
                mhat = m1[k] / (1 - beta1 ** step)
                vhat = m2[k] / (1 - beta2 ** step)
                new[k] = v - lr * mhat / (np.sqrt(vhat) + tiny)
            params = new
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)))
    weights.params = params
    result = TrainResult(weights, losses, float("nan") if initial is None else initial)
    if validation:
        val_rng = np.random.default_rng([seed, 1])
        result.val_loss = denoising_loss(weights, validation, schedule, val_rng)
        result.baseline = noise_floor(validation, schedule, np.random.default_rng([seed, 1]))
    return result


def noise_floor(dataset, schedule: Schedule, rng: np.random.Generator) -> float:
    """Loss of the constant-zero predictor under the same ``(t, eps)`` draws as ``denoising_loss``."""
    vals = []
    for _, z0 in dataset:
        t = int(rng.integers(1, schedule.t_max + 1))
        eps = rng.standard_normal(np.shape(z0))
        vals.append(float(np.sum(_target(schedule, np.asarray(z0), eps) ** 2)))
    return float(np.mean(vals))
