import io
import json
import math

import numpy as np
import pytest

from zscount.checkpoint import read_checkpoint
from zscount.checks import tiny_config as _tiny
from zscount.data import Manifest, build_datasets
from zscount.train import (
    TrainingError,
    ablate,
    build_model,
    count_metrics,
    cross_family_eval,
    evaluate,
    expand_matrix,
    train,
)

TINY_MANIFEST = Manifest(n_train=6, n_val=4, n_test=4, image_size=32, count_range=[1, 3], distractors=False)


def tiny_config(seed, **changes):
    base = _tiny(seed)
    model = {**base.model.__dict__, "image_size": 32, "patch_size": 8, "upsample": [2, 2, 2]}
    return base.replace(model=model, **changes)


@pytest.fixture(scope="module")
def tiny():
    split, sets = build_datasets(TINY_MANIFEST)
    return split, sets


def test_metric_examples():
    mae, rmse = count_metrics([10, 20], [12, 16])
    assert mae == 3.0 and abs(rmse - math.sqrt(10)) < 1e-12
    assert count_metrics([4, 5], [4, 5]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        count_metrics([], [])


def test_evaluate_contract(tiny):
    _, sets = tiny
    model = build_model(tiny_config(0))
    rep = evaluate(model, sets["test"])
    assert rep.n_samples == 4 and rep.mae <= rep.rmse
    again = evaluate(model, sets["test"])
    assert again.predictions == rep.predictions
    assert sum(v["n"] for v in rep.per_class.values()) == 4
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_zero_epochs_checkpoint_is_init(tiny, tmp_path):
    _, sets = tiny
    cfg = tiny_config(0, epochs=0)
    result = train(cfg, sets["train"], sets["val"], out_dir=tmp_path)
    init = build_model(cfg).state_dict()
    saved = read_checkpoint(result.checkpoint)
    assert set(saved) == set(init)
    assert all(np.array_equal(saved[k], init[k]) for k in init)


def test_training_is_deterministic_and_streams_metrics(tiny):
    split, sets = tiny
    cfg = tiny_config(1, epochs=2, batch_size=4, lr=1e-3)
    buf = io.StringIO()
    a = train(cfg, sets["train"], sets["val"], allowed_classes=split.seen, stream=buf)
    b = train(cfg, sets["train"], sets["val"], allowed_classes=split.seen)
    assert a.curve == b.curve
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "l_count", "l_rank", "l_total", "train_mae", "val_mae"}
    assert a.model.fingerprint() == b.model.fingerprint()


def test_unseen_classes_never_train(tiny):
    split, sets = tiny
    with pytest.raises(TrainingError, match="outside"):
        train(tiny_config(0, epochs=1), sets["test"], None, allowed_classes=split.seen)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_dump(tiny, tmp_path):
    _, sets = tiny
    cfg = tiny_config(0, epochs=1)
    model = build_model(cfg)
    model.decoder.head.bias.data[...] = np.nan
    with pytest.raises(TrainingError) as info:
        train(cfg, sets["train"], None, model=model, out_dir=tmp_path)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert {"lr", "grad_norms", "classes"} <= set(dump)
    assert info.value.diagnostics["epoch"] == 1


def test_matrix_rows():
    rows = dict(expand_matrix(["m1", "m2", "m3", "m4", "m5"], 6))
    assert len(rows) == 5
    assert rows["m5"] == {"use_spt": True, "use_lat": True, "use_sasc": True}
    assert rows["m1"] == {"use_spt": False, "use_lat": False, "use_sasc": False}
    assert dict(expand_matrix(["table4-spt"], 6))["table4-spt"]["condition_spt_on_text"] is False
    assert dict(expand_matrix(["table4-sasc"], 6))["table4-sasc"]["filter_sasc_with_map"] is False
    assert dict(expand_matrix(["table5-singular"], 6))["table5-singular"]["prompt_mode"] == "singular"
    assert [c["num_prompts"] for _, c in expand_matrix(["sweep-tokens"], 6)] == [1, 5, 10, 20]
    spans = [c["spt_layers"] for _, c in expand_matrix(["sweep-depth"], 6)]
    assert spans == [[1, 2], [1, 3], [5, 6], [4, 6], [1, 6]]
    taps = [c["tap_map"] for _, c in expand_matrix(["sweep-taps"], 6)]
    assert taps[0] == {"1": 2, "2": 3, "3": 4} and len(taps) == 4
    with pytest.raises(KeyError):
        expand_matrix(["m9"], 6)


def test_ablate_runs_rows_with_shared_seed(tiny):
    split, sets = tiny
    rows = ablate(tiny_config(0, epochs=1), ["m1", "m5"], sets["train"], sets["val"], sets["test"],
                  allowed_classes=split.seen)
    assert [r.name for r in rows] == ["m1", "m5"]
    assert rows[0].lat is None and rows[1].lat is not None
    assert rows[1].flags["use_spt"] and rows[1].flags["use_lat"] and rows[1].flags["use_sasc"]
    assert json.loads(json.dumps(rows[1].to_json()))["lat"][0]["matrix"] == "W"


def test_cross_family_keeps_weights(tiny):
    from zscount.data import generate_set

    cars = Manifest(family="cars-grid", image_size=64)
    samples = generate_set(cars, "test", cars.classes, 2)
    model = build_model(tiny_config(0).replace(model={**tiny_config(0).model.__dict__, "image_size": 64,
                                                       "patch_size": 16, "upsample": [2, 2, 2, 2]}))
    before = model.fingerprint()
    rep = cross_family_eval(model, samples, train_family="discs-world")
    assert rep.n_samples == 2 and model.fingerprint() == before
    with pytest.warns(UserWarning):
        cross_family_eval(model, samples, train_family="cars-grid")
