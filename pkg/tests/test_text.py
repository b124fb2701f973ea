import numpy as np
import pytest

from zscount import tensor as T
from zscount.tensor import ContractError
from zscount.text import PromptTemplateSet, SemanticProjector, TextEncoder, Vocabulary, load_templates


@pytest.fixture(scope="module")
def encoder():
    return TextEncoder(d_text=64, layers=2, heads=4, max_len=16, seed=0)


def test_template_counts():
    assert len(load_templates("singular").templates) == 15
    assert len(load_templates("plural").templates) == 11
    assert all(t.count("{}") == 1 for t in load_templates("plural").templates)


def test_template_needs_one_placeholder():
    with pytest.raises(ContractError):
        PromptTemplateSet("plural", ("no placeholder",))
    with pytest.raises(ContractError):
        load_templates("dual")


def test_tokenize_examples():
    vocab = Vocabulary(extra_words=["kiwi"])
    ids = vocab.tokenize("a photo of kiwi", 10)
    expected = [vocab.start_id, vocab.stoi["a"], vocab.stoi["photo"], vocab.stoi["of"], vocab.stoi["kiwi"],
                vocab.end_id] + [vocab.pad_id] * 4
    assert ids == expected
    assert vocab.tokenize("zzz", 4)[1] == vocab.unk_id
    with pytest.raises(ContractError):
        vocab.tokenize("", 8)


def test_tokenize_truncation_keeps_frame():
    vocab = Vocabulary()
    ids = vocab.tokenize("a photo of many many many red discs", 5)
    assert len(ids) == 5 and ids[0] == vocab.start_id and ids[-1] == vocab.end_id


def test_encode_text_contract(encoder):
    a = encoder.encode_text("a photo of red disc")
    assert np.array_equal(a, encoder.encode_text("a photo of red disc"))
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    b = encoder.encode_text("a photo of blue square")
    assert float(a @ b) < 1.0


def test_ensemble(encoder):
    one = PromptTemplateSet("plural", ("a photo of {}.",))
    assert np.allclose(encoder.encode_templates("red-disc", one), encoder.encode_text("a photo of red-disc."))
    plural = load_templates("plural")
    emb = encoder.encode_templates("kiwi", plural)
    direct = np.mean([encoder.encode_text(t.format("kiwi")) for t in plural.templates], axis=0)
    assert np.allclose(emb, direct / np.linalg.norm(direct), atol=1e-12)
    assert abs(np.linalg.norm(emb) - 1) < 1e-12
    shuffled = PromptTemplateSet("plural", tuple(reversed(plural.templates)))
    assert np.array_equal(encoder.encode_templates("kiwi", shuffled), emb)


def test_text_encoder_is_frozen(encoder):
    assert encoder.parameters() == []


def test_projector_examples():
    proj = SemanticProjector(4, 4, seed=0)
    x = T.tensor(np.random.default_rng(0).standard_normal((2, 4)))
    proj.weight.data[...] = 0.0
    proj.bias.data[...] = 0.0
    assert np.array_equal(proj(x).data, np.zeros((2, 4)))
    proj.weight.data[...] = np.eye(4)
    assert np.array_equal(proj(x).data, x.data)


def test_projector_shared_across_layers():
    from zscount.config import TrainConfig
    from zscount.model import ZeroShotCounter

    model = ZeroShotCounter(TrainConfig())
    assert [n for n, _ in model.named_parameters() if n.startswith("projector.")] == ["projector.weight", "projector.bias"]
