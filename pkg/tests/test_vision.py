import numpy as np
import pytest

from zscount import tensor as T
from zscount.tensor import ShapeError
from zscount.vision import ImageEncoder, PromptBank, build_prompts, patchify_pixels


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).random((2, 3, 64, 64))


def test_patch_count():
    assert patchify_pixels(np.zeros((1, 3, 64, 64)), 8).shape == (1, 64, 192)
    with pytest.raises(ShapeError):
        patchify_pixels(np.zeros((1, 3, 60, 64)), 8)


def test_patch_embedding_is_local(images):
    enc = ImageEncoder(seed=0)
    other = images.copy()
    other[0, :, 8:16, 16:24] += 1.0  # patch (1, 2) -> index 10
    diff = np.abs(enc.patchify(other).data - enc.patchify(images).data).sum(axis=-1)[0]
    assert np.flatnonzero(diff).tolist() == [10]


def test_zero_image_and_embedding_give_positions():
    enc = ImageEncoder(seed=0)
    enc.patch_embed.weight.data[...] = 0.0
    out = enc.patchify(np.zeros((1, 3, 64, 64))).data[0]
    assert np.array_equal(out, enc.position_embedding.data)


def test_build_prompts_examples():
    p = T.tensor(np.random.default_rng(1).standard_normal((3, 4)))
    assert np.array_equal(build_prompts(p, T.tensor(np.zeros((2, 4)))).data, np.broadcast_to(p.data, (2, 3, 4)))
    t = T.tensor(np.random.default_rng(2).standard_normal((1, 4)))
    assert np.array_equal(build_prompts(T.tensor(np.zeros((3, 4))), t).data[0], np.repeat(t.data, 3, axis=0))
    out = build_prompts(T.tensor([[1.0, 0.0, 0.0]]), T.tensor([[0.0, 1.0, 0.0]])).data
    assert np.array_equal(out[0, 0], [1.0, 1.0, 0.0])
    with pytest.raises(ShapeError):
        build_prompts(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((1, 4))))


@pytest.mark.parametrize("m", [0, 1, 10])
def test_every_layer_emits_one_plus_n_tokens(images, m):
    enc = ImageEncoder(seed=0)
    bank = PromptBank(m, 64, list(range(1, 7)), seed=0)
    sem = T.tensor(np.random.default_rng(3).standard_normal((2, 64)))
    out = enc(images, bank, sem, taps=(3, 4, 5))
    assert out.lengths == [65] * 6
    assert out.patches.shape == (2, 64, 64)
    assert all(out.taps[k].shape == (2, 64, 64) for k in (3, 4, 5))


def test_zero_prompts_equal_plain_encoder(images):
    enc = ImageEncoder(seed=0)
    plain = enc(images).patches.data
    bank = PromptBank(0, 64, list(range(1, 7)), seed=0)
    assert np.array_equal(enc(images, bank, T.tensor(np.ones((2, 64)))).patches.data, plain)


def test_semantic_changes_output_only_with_prompts(images):
    enc = ImageEncoder(seed=0)
    bank = PromptBank(4, 64, [1, 2, 3], seed=0)
    a, b = (T.tensor(np.random.default_rng(s).standard_normal((2, 64))) for s in (4, 5))
    assert not np.array_equal(enc(images, bank, a).patches.data, enc(images, bank, b).patches.data)
    assert np.array_equal(enc(images, None, a).patches.data, enc(images, None, b).patches.data)


def test_prompt_gradients_flow(images):
    enc = ImageEncoder(seed=0)
    bank = PromptBank(2, 64, [2, 5], seed=0)
    sem = T.parameter(np.random.default_rng(6).standard_normal((2, 64)))
    T.backward((enc(images, bank, sem).patches * T.tensor(np.random.default_rng(7).standard_normal((2, 64, 64)))).sum())
    assert all(np.abs(p.grad).sum() > 0 for p in bank.parameters())
    assert np.abs(sem.grad).sum() > 0


def test_tap_out_of_range(images):
    with pytest.raises(ShapeError):
        ImageEncoder(seed=0)(images, taps=(7,))
