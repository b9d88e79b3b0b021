import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import softmax

from sagalab import tensor as T
from sagalab.backend import (AnalyticBackend, AttentionMaps, NeglectModel, PromptSpec, build_scene_dataset,
                             make_prompts, preprocess_attention)
from sagalab.backend.attention import PREPROCESSED, RAW, gaussian_kernel
from sagalab.backend.scenes import box_mask, render_scene, signature_templates
from sagalab.schedule import VP, estimate_z0


def brute_posterior(entry, z, a, b):
    """Posterior over prototypes from squared distances, one latent at a time."""
    d = np.array([np.sum((z - a * p) ** 2) for p in entry.prototypes])
    w = softmax(entry.log_weights - d / (2 * b * b))
    return w, np.tensordot(w, entry.prototypes, axes=1)


@pytest.mark.parametrize("t_index", [0, 10, 25, 40, 49])
def test_posterior_mean_matches_brute_force(small_world, small_backend, vp, t_index):
    prompts, lib = small_world
    t = vp.grid[t_index]
    a, b = vp.coefficients(t)
    rng = np.random.default_rng(t_index)
    for p in prompts:
        entry = lib.entry(p)
        z = a * entry.prototypes[rng.integers(len(entry.prototypes))] + b * rng.standard_normal(lib.shape)
        out = small_backend.predict(z, p, t)
        w, z0 = brute_posterior(entry, z, a, b)
        np.testing.assert_allclose(out.weights.numpy(), w, atol=1e-10)
        np.testing.assert_allclose(out.z0_hat.numpy(), z0, atol=1e-10)
        np.testing.assert_allclose(estimate_z0(vp, z, out.prediction.numpy(), t), out.z0_hat.numpy(), atol=1e-9)


def test_attention_is_clamped_signature_projection(small_world, small_backend, vp):
    prompts, lib = small_world
    p = prompts[0]
    z = np.random.default_rng(0).standard_normal(lib.shape)
    out = small_backend.predict(z, p, vp.grid[10])
    z0 = out.z0_hat.numpy()
    sig = lib.attention_templates(p.entities)
    expect = np.maximum(np.einsum("sc,chw->shw", sig, z0), 0.0)
    np.testing.assert_allclose(out.maps.values.numpy(), expect, atol=1e-14)
    assert out.maps.stage == RAW


def test_batched_and_single_predictions_agree(small_world, small_backend, vp):
    prompts, lib = small_world
    z = np.random.default_rng(1).standard_normal((3,) + lib.shape)
    batch = small_backend.predict(z, prompts[1], 781).z0_hat.numpy()
    for i in range(3):
        np.testing.assert_allclose(small_backend.predict(z[i], prompts[1], 781).z0_hat.numpy(), batch[i],
                                   atol=1e-13)


def test_wrong_latent_shape_rejected(small_world, small_backend):
    with pytest.raises(T.ShapeError):
        small_backend.predict(np.zeros((4, 9, 8)), small_world[0][0], 781)


def test_unknown_prompt_rejected(small_backend):
    with pytest.raises(KeyError):
        small_backend.predict(np.zeros((4, 8, 8)), PromptSpec("nope", (0, 1)), 781)


def test_unconditional_mixes_every_prompt(small_world):
    _, lib = small_world
    u = lib.unconditional()
    assert len(u.prototypes) == sum(len(e.prototypes) for e in lib.entries.values())
    assert np.exp(u.log_weights).sum() == pytest.approx(1.0)


# -- preprocessing ----------------------------------------------------------------------


@given(st.integers(0, 1000))
def test_preprocessed_maps_are_unit_sum_and_positive(seed):
    raw = np.abs(np.random.default_rng(seed).standard_normal((2, 3, 5, 6))) * 0.05
    out = preprocess_attention(AttentionMaps(T.Tensor(raw), RAW))
    v = out.values.numpy()
    assert out.stage == PREPROCESSED
    assert np.all(v > 0)
    np.testing.assert_allclose(v.sum(axis=(-2, -1)), 1.0, atol=1e-12)


def test_preprocess_rejects_processed_maps():
    m = AttentionMaps(T.Tensor(np.ones((1, 2, 2))), PREPROCESSED)
    with pytest.raises(ValueError):
        preprocess_attention(m)


def test_smoothing_kernel():
    k = gaussian_kernel()
    assert k.shape == (3, 3) and k.sum() == pytest.approx(1.0)
    # Off-centre to centre ratio of a sigma-0.5 Gaussian is exp(-2).
    assert k[0, 1] / k[1, 1] == pytest.approx(np.exp(-2.0))


def test_preprocessing_gradient(small_world):
    rng = np.random.default_rng(5)
    x0 = np.abs(rng.standard_normal((2, 4, 4))) * 0.02
    w = rng.standard_normal((2, 4, 4))
    err = T.grad_check(lambda x: T.tsum(T.mul(preprocess_attention(AttentionMaps(x, RAW)).values, w)), x0)
    assert err < 1e-5


# -- scenes -------------------------------------------------------------------------------


def test_templates_are_unit_norm_and_distinct():
    tpl = signature_templates(8, 4)
    np.testing.assert_allclose(np.linalg.norm(tpl, axis=1), 1.0)
    gram = tpl @ tpl.T - 2 * np.eye(8)
    assert gram.max() < 0.99


@given(st.integers(0, 10_000), st.sampled_from(["faint", "mix"]), st.floats(0, 1))
def test_every_prototype_draws_each_entity_once(seed, mode, rate):
    rng = np.random.default_rng(seed)
    prompts = make_prompts(2, 3, 6, rng)
    lib, _ = build_scene_dataset(6, (4, 8, 8), 1.0, prompts, 5, rng, neglect=NeglectModel(rate, mode))
    for p in prompts:
        e = lib.entry(p)
        assert e.centers.shape == (5, 3, 2) and e.amplitudes.shape == (5, 3)
        for c in e.centers:
            assert len({tuple(v) for v in c}) == 3
        if mode == "mix":
            assert np.all(e.amplitudes == 1.0)
            assert np.all((e.mixing == 0) == (e.partners == np.array(p.entities)))
        else:
            assert np.all(e.mixing == 0)


def test_zero_neglect_is_faithful():
    prompts = make_prompts(3, 2, 5, np.random.default_rng(0))
    lib, _ = build_scene_dataset(5, (4, 8, 8), 1.0, prompts, 6, np.random.default_rng(1))
    for e in lib.entries.values():
        assert e.faithful(1.0).all()


def test_prototype_is_rendered_scene():
    prompts = make_prompts(1, 2, 5, np.random.default_rng(0))
    lib, _ = build_scene_dataset(5, (4, 8, 8), 1.0, prompts, 2, np.random.default_rng(1))
    e = lib.entry(prompts[0])
    sigs = lib.templates[list(prompts[0].entities)]
    np.testing.assert_allclose(e.prototypes[0], render_scene(e.centers[0], e.amplitudes[0], sigs, lib.shape, 1.0))


def test_boxed_prompts_place_blobs_in_boxes():
    prompts = make_prompts(4, 2, 6, np.random.default_rng(2), hw=(12, 12), boxes=True)
    lib, _ = build_scene_dataset(6, (3, 12, 12), 1.0, prompts, 8, np.random.default_rng(3))
    for p in prompts:
        for cs in lib.entry(p).centers:
            for (r, c), (x1, y1, x2, y2) in zip(cs, p.boxes):
                assert y1 <= r < y2 and x1 <= c < x2


def test_random_square_boxes_are_disjoint_and_inside():
    prompts = make_prompts(20, 3, 8, np.random.default_rng(4), hw=(16, 16), boxes=True, box_side=4)
    for p in prompts:
        for x1, y1, x2, y2 in p.boxes:
            assert x2 - x1 == 4 and 1 <= x1 and x2 <= 15 and 1 <= y1 and y2 <= 15


def test_scene_draws_come_from_library():
    prompts = make_prompts(2, 2, 4, np.random.default_rng(0))
    lib, scenes = build_scene_dataset(4, (3, 6, 6), 1.0, prompts, 3, np.random.default_rng(1), n_scenes=10)
    assert len(scenes) == 10
    for pid, z0 in scenes:
        assert any(np.array_equal(z0, p) for p in lib.entries[pid].prototypes)


@pytest.mark.parametrize("kwargs", [
    dict(prompt_id="x", entities=(1, 1)),
    dict(prompt_id="x", entities=(0, 1, 2, 3, 4)),
    dict(prompt_id="x", entities=(0, 1), boxes=((0, 0, 3, 3), (2, 2, 5, 5))),
    dict(prompt_id="x", entities=(0, 1), boxes=((0, 0, 3, 3),)),
    dict(prompt_id="x", entities=(0,), boxes=((2, 0, 2, 3),)),
])
def test_invalid_prompts_rejected(kwargs):
    with pytest.raises(ValueError):
        PromptSpec(**kwargs)


def test_prompt_dict_round_trip():
    p = PromptSpec("q", (3, 1), ((0, 0, 2, 2), (3, 3, 5, 5)))
    assert PromptSpec.from_dict(p.to_dict()) == p


def test_box_mask_is_half_open():
    m = box_mask((1, 2, 3, 4), (5, 5))
    assert m.sum() == 4 and m[2, 1] == 1 and m[3, 2] == 1 and m[4, 1] == 0


def test_neglect_model_validation():
    with pytest.raises(ValueError):
        NeglectModel(1.5)
    with pytest.raises(ValueError):
        NeglectModel(0.2, "swap")


def test_entities_outside_vocab_rejected():
    with pytest.raises(ValueError):
        build_scene_dataset(3, (3, 6, 6), 1.0, [PromptSpec("a", (0, 5))], 2, np.random.default_rng(0))


def test_schedule_kind_is_vp(small_backend):
    assert small_backend.schedule.kind == VP
