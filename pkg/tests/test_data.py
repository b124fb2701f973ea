import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zscount.data import (
    ALL_CLASSES,
    Manifest,
    build_datasets,
    family_classes,
    gaussian_density,
    generate_sample,
    get_class,
    hflip,
    hflip_augment,
    make_split,
    mean_nn_distance,
)
from zscount.tensor import ContractError

DISC = get_class("red-disc")


def test_density_examples():
    assert np.array_equal(gaussian_density(np.zeros((0, 2)), 1.5, 16, 16), np.zeros((1, 16, 16)))
    assert abs(gaussian_density([[32.0, 32.0]], 1.5, 64, 64).sum() - 1.0) < 1e-6
    centers = np.random.default_rng(0).uniform(5, 59, (7, 2))
    assert abs(gaussian_density(centers, 1.5, 64, 64).sum() - 7.0) < 1e-6


def test_density_at_border_keeps_unit_mass():
    assert abs(gaussian_density([[0.2, 63.9]], 1.5, 64, 64).sum() - 1.0) < 1e-9
    with pytest.raises(ContractError):
        gaussian_density([[70.0, 3.0]], 1.5, 64, 64)
    with pytest.raises(ContractError):
        gaussian_density([[3.0, 3.0]], 0.0, 64, 64)


def test_families_and_classes():
    assert len(family_classes("discs-world")) == 12
    assert {c.family for c in family_classes("cars-grid")} == {"cars-grid"}
    with pytest.raises(ContractError):
        get_class("purple-blob")


def test_generation_deterministic():
    a = generate_sample(DISC, (3, 20), 5, distractors=True)
    b = generate_sample(DISC, (3, 20), 5, distractors=True)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.density, b.density)
    assert np.array_equal(a.centers, b.centers) and a.distractor_class == b.distractor_class


def test_degenerate_count_range():
    assert generate_sample(DISC, (5, 5), 1).count == 5


def test_distractors_are_not_counted():
    s = generate_sample(DISC, (4, 8), 2, distractors=True)
    assert s.distractor_class not in (None, DISC.name)
    assert len(s.distractor_centers) > 0
    assert abs(s.density.sum() - s.count) < 1e-6


def test_cars_grid_layout():
    s = generate_sample(get_class("red-car"), (3, 20), 0, distractors=True)
    assert abs(s.density.sum() - s.count) < 1e-6
    assert s.image.shape == (3, 64, 64)


def test_split_examples():
    names = [f"c{i}" for i in range(10)]
    split = make_split(names, 0, 0.7)
    assert (len(split.seen), len(split.unseen)) == (7, 3)
    assert make_split(names, 0, 0.7) == split
    with pytest.raises(ContractError):
        make_split(names, 0, 1.0)


@given(st.integers(0, 10_000))
def test_split_disjoint(seed):
    split = make_split(sorted(ALL_CLASSES), seed, 2 / 3)
    assert not set(split.seen) & set(split.unseen)
    assert set(split.seen) | set(split.unseen) == set(ALL_CLASSES)


def test_flip_examples():
    s = generate_sample(DISC, (3, 10), 3)
    assert hflip_augment(s, 0.0, 0) is s or np.array_equal(hflip_augment(s, 0.0, 0).image, s.image)
    back = hflip(hflip(s))
    assert np.array_equal(back.image, s.image) and np.allclose(back.centers, s.centers)
    assert np.allclose(back.density, s.density)
    assert abs(hflip(s).density.sum() - s.density.sum()) < 1e-12


def test_flip_mirrors_centers():
    s = generate_sample(DISC, (3, 10), 4)
    f = hflip(s)
    assert np.allclose(f.centers[:, 0], 64 - s.centers[:, 0]) and np.allclose(f.centers[:, 1], s.centers[:, 1])


def test_manifest_roundtrip_and_strictness(tmp_path):
    m = Manifest(n_train=4, n_val=2, n_test=2)
    path = tmp_path / "m.json"
    path.write_text(__import__("json").dumps(m.to_dict()))
    assert Manifest.load(path) == m
    with pytest.raises(ContractError):
        Manifest.from_dict({**m.to_dict(), "bogus": 1})


def test_datasets_respect_split():
    split, sets = build_datasets(Manifest(n_train=16, n_val=8, n_test=8))
    assert {s.class_name for s in sets["train"]} <= set(split.seen)
    assert {s.class_name for s in sets["val"]} <= set(split.seen)
    assert {s.class_name for s in sets["test"]} <= set(split.unseen)


def test_instances_are_separated():
    s = generate_sample(DISC, (20, 20), 6)
    assert mean_nn_distance(s.centers) >= 6.0
