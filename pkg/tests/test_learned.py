import numpy as np
import pytest

from sagalab import tensor as T
from sagalab.backend import PromptSpec, build_scene_dataset, make_prompts
from sagalab.backend.learned import (LearnedBackend, TrainingError, denoising_loss, init_weights,
                                     learned_forward, prompt_tokens, time_embedding, train_toy_backend)
from sagalab.schedule import make_schedule

SHAPE = (3, 4, 4)


@pytest.fixture(scope="module")
def weights():
    w = init_weights(5, SHAPE, np.random.default_rng(0), width=8, heads=2, hidden=8)
    w.params["w2"] = np.random.default_rng(1).standard_normal(w.params["w2"].shape) * 0.1
    return w


def test_tokens_put_null_first(weights):
    assert prompt_tokens(weights, PromptSpec("x", (3, 1))) == [5, 3, 1]
    assert prompt_tokens(weights, None) == [5]
    with pytest.raises(ValueError):
        prompt_tokens(weights, PromptSpec("x", (5,)))


def test_time_embedding_bounds():
    e = time_embedding(np.array([0.0, 500.0]), 8)
    assert e.shape == (2, 8) and np.all(np.abs(e) <= 1)
    np.testing.assert_array_equal(e[0, 4:], 1.0)


def test_untrained_model_predicts_zero():
    w = init_weights(3, SHAPE, np.random.default_rng(0), width=8)
    be = LearnedBackend(w, make_schedule("vp"))
    out = be.predict(np.ones(SHAPE), PromptSpec("x", (0, 1)), 500)
    assert np.all(out.prediction.numpy() == 0)


def test_backend_shapes_and_attention_mass(weights):
    be = LearnedBackend(weights, make_schedule("vp"))
    out = be.predict(np.random.default_rng(2).standard_normal((2,) + SHAPE), PromptSpec("x", (0, 2, 4)), 301)
    assert out.prediction.shape == (2,) + SHAPE and out.z0_hat.shape == (2,) + SHAPE
    m = out.maps.values.numpy()
    assert m.shape == (2, 3, 4, 4)
    # Entity columns share each cell's softmax with the null token.
    assert np.all(m > 0) and np.all(m.sum(axis=1) < 1)


def test_forward_gradient_wrt_parameters(weights):
    z = T.Tensor(np.random.default_rng(3).standard_normal((1,) + SHAPE))
    rw = np.random.default_rng(4).standard_normal((1,) + SHAPE)
    for name in ("wq", "embed", "w1", "w_in"):
        def f(x, name=name):
            params = {k: T.Tensor(v) for k, v in weights.params.items()}
            params[name] = x
            pred, attn = learned_forward(weights, params, z, [5, 0, 1], 400)
            return T.add(T.tsum(T.mul(pred, rw)), T.tsum(attn))
        assert T.grad_check(f, weights.params[name]) < 1e-5


def test_schedule_mismatch_rejected(weights):
    with pytest.raises(ValueError):
        LearnedBackend(weights, make_schedule("flow"))


def test_training_beats_the_zero_predictor():
    s = make_schedule("vp")
    prompts = make_prompts(3, 2, 4, np.random.default_rng(0))
    lib, scenes = build_scene_dataset(4, SHAPE, 1.0, prompts, 2, np.random.default_rng(1), n_scenes=60)
    lookup = {p.prompt_id: p for p in prompts}
    data = [(lookup[pid], z) for pid, z in scenes]
    res = train_toy_backend(data[:40], s, epochs=3, lr=3e-3, batch=5, seed=0, width=8, hidden=16,
                            validation=data[40:])
    assert res.losses[-1] < res.initial_loss
    assert res.val_loss < res.baseline
    again = train_toy_backend(data[:40], s, epochs=3, lr=3e-3, batch=5, seed=0, width=8, hidden=16)
    for k in res.weights.params:
        assert again.weights.params[k].tobytes() == res.weights.params[k].tobytes()


def test_training_argument_checks():
    s = make_schedule("vp")
    with pytest.raises(ValueError):
        train_toy_backend([], s, 1, 1e-3, 1, 0)
    with pytest.raises(ValueError):
        train_toy_backend([(PromptSpec("x", (0,)), np.zeros(SHAPE))], s, 1, 0.0, 1, 0)


def test_training_error_is_runtime_error():
    assert issubclass(TrainingError, RuntimeError)


def test_denoising_loss_of_zero_model_is_target_energy():
    s = make_schedule("flow")
    w = init_weights(2, SHAPE, np.random.default_rng(0), width=8)
    data = [(PromptSpec("x", (0,)), np.zeros(SHAPE))] * 200
    # With z0 = 0 the flow target is eps, whose squared norm averages the element count.
    assert denoising_loss(w, data, s, np.random.default_rng(0)) == pytest.approx(48, rel=0.05)
