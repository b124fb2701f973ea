import numpy as np
import pytest

from zscount import tensor as T
from zscount.config import TrainConfig
from zscount.data import Manifest, build_datasets
from zscount.model import ZeroShotCounter
from zscount.train import build_model


@pytest.fixture(scope="module")
def batch():
    _, sets = build_datasets(Manifest(n_train=2, n_val=0, n_test=2))
    s = sets["train"] + sets["test"]
    return np.stack([x.image for x in s]), [x.class_name for x in s]


def run(cfg, batch):
    with T.no_grad():
        return ZeroShotCounter(cfg)(*batch)


def test_forward_shapes(batch):
    out = run(TrainConfig(), batch)
    assert out.similarity.shape == (4, 8, 8) and out.counting_map.shape == (4, 8, 8)
    assert out.density.density.shape == (4, 1, 64, 64)
    assert np.all(np.abs(out.similarity.data) <= 1)


def test_lat_identity_at_init(batch):
    out = run(TrainConfig(), batch)
    assert np.array_equal(out.counting_map.data, out.similarity.data)


def test_zero_prompts_equal_baseline(batch):
    spt = run(TrainConfig(use_spt=True, num_prompts=0, use_lat=False, use_sasc=False), batch)
    base = run(TrainConfig(use_spt=False, use_lat=False, use_sasc=False), batch)
    assert np.array_equal(spt.density.density.data, base.density.density.data)


def test_empty_tap_map_equals_sasc_off(batch):
    empty = run(TrainConfig(use_sasc=True, tap_map={}), batch)
    off = run(TrainConfig(use_sasc=False), batch)
    assert np.array_equal(empty.density.density.data, off.density.density.data)


def test_class_name_changes_output_only_through_semantics(batch):
    images, names = batch
    model = ZeroShotCounter(TrainConfig())
    with T.no_grad():
        a = model(images[:1], ["red-disc"]).encoded.patches.data
        b = model(images[:1], ["blue-square"]).encoded.patches.data
    assert not np.array_equal(a, b)
    plain = ZeroShotCounter(TrainConfig(use_spt=False))
    with T.no_grad():
        assert np.array_equal(plain(images[:1], ["red-disc"]).encoded.patches.data,
                              plain(images[:1], ["blue-square"]).encoded.patches.data)


def test_table4_flags(batch):
    no_cond = ZeroShotCounter(TrainConfig(condition_spt_on_text=False))
    assert no_cond.projector is None and no_cond.prompts is not None
    gated = run(TrainConfig(), batch).density.density.data
    ungated = run(TrainConfig(filter_sasc_with_map=False), batch).density.density.data
    assert not np.array_equal(gated, ungated)


def test_unseen_class_accepted(batch):
    images, _ = batch
    counts = ZeroShotCounter(TrainConfig()).predict_counts(images[:1], ["yellow-car"])
    assert counts.shape == (1,) and counts[0] > 0


def test_parameters_snapped_to_float32():
    model = build_model(TrainConfig())
    assert all(np.array_equal(p.data, p.data.astype(np.float32)) for p in model.parameters())


def test_init_is_seeded():
    assert build_model(TrainConfig(seed=1)).fingerprint() == build_model(TrainConfig(seed=1)).fingerprint()
    assert build_model(TrainConfig(seed=1)).fingerprint() != build_model(TrainConfig(seed=2)).fingerprint()


def test_flags_keep_shared_weights_identical():
    a = dict(ZeroShotCounter(TrainConfig()).named_parameters())
    b = dict(ZeroShotCounter(TrainConfig(use_spt=False, use_lat=False, use_sasc=False)).named_parameters())
    for name, p in b.items():
        assert np.array_equal(a[name].data, p.data), name
