import struct

import numpy as np
import pytest

from zscount.checkpoint import MAGIC, CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from zscount.config import TrainConfig
from zscount.export import equal_to_sig_digits, read_csv, read_pgm, to_pgm_levels, write_csv, write_pgm
from zscount.optim import OptimizerState, adamw_step
from zscount.tensor import ShapeError, parameter
from zscount.train import build_model


def test_checkpoint_layout_by_hand():
    blob = encode_checkpoint({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = MAGIC + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2) + struct.pack("<QQ", 1, 2)
    expected += np.array([1.0, 2.0], dtype="<f4").tobytes() + struct.pack("<Q", 1)
    assert blob == expected
    assert np.array_equal(decode_checkpoint(blob)["w"], [[1.0, 2.0]])


def test_checkpoint_corruption_detected():
    blob = encode_checkpoint({"a": np.ones(3, dtype=np.float32), "b": np.zeros((2, 2), dtype=np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-12])
    with pytest.raises(CheckpointError, match="count"):
        decode_checkpoint(blob[:-8] + struct.pack("<Q", 5))


def test_model_roundtrip_bitwise(tmp_path):
    model = build_model(TrainConfig(seed=3))
    path = tmp_path / "m.zsc"
    save_checkpoint(model, path)
    fresh = build_model(TrainConfig(seed=4))
    load_checkpoint(fresh, path)
    for (n, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    assert model.fingerprint() == fresh.fingerprint()


def test_shape_mismatch_rejected(tmp_path):
    path = tmp_path / "m.zsc"
    save_checkpoint(build_model(TrainConfig(num_prompts=4)), path)
    with pytest.raises(CheckpointError):
        load_checkpoint(build_model(TrainConfig(num_prompts=5)), path)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.zsc")


def test_pgm_levels_round_half_up():
    assert to_pgm_levels(np.array([0.0, 0.5, 1.0])).tolist() == [0, 32768, 65535]
    assert to_pgm_levels(np.full(3, 2.0)).tolist() == [0, 0, 0]


def test_pgm_and_csv_reparse(tmp_path):
    m = np.random.default_rng(0).normal(size=(8, 8))
    write_pgm(m, tmp_path / "m.pgm")
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), to_pgm_levels(m))
    assert (tmp_path / "m.pgm").read_text().startswith("P2\n8 8\n65535\n")
    write_csv(m, tmp_path / "m.csv")
    assert equal_to_sig_digits(read_csv(tmp_path / "m.csv"), m, 9)
    assert np.allclose(read_csv(tmp_path / "m.csv"), m, rtol=1e-8, atol=0)


def test_adamw_examples():
    p = parameter([1.0, -2.0])
    p.grad = np.zeros(2)
    adamw_step([p], OptimizerState(), lr=0.1, weight_decay=0.0)
    assert np.array_equal(p.data, [1.0, -2.0])
    p.grad = np.zeros(2)
    adamw_step([p], OptimizerState(), lr=0.1, weight_decay=0.5)
    assert np.allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))
    q = parameter([1.0])
    q.grad = np.array([1.0])
    adamw_step([q], OptimizerState(), lr=0.1, weight_decay=0.0)
    assert abs(q.data[0] - 0.900000001) < 1e-12


def test_adamw_lr_zero_is_identity_and_shape_check():
    rng = np.random.default_rng(0)
    p = parameter(rng.normal(size=(3, 2)))
    before = p.data.copy()
    state = OptimizerState()
    for _ in range(3):
        p.grad = rng.normal(size=(3, 2))
        adamw_step([p], state, lr=0.0, weight_decay=0.1)
    assert np.array_equal(p.data, before) and state.step == 3
    p.grad = np.zeros((2, 3))
    with pytest.raises(ShapeError):
        adamw_step([p], state, lr=0.1, weight_decay=0.0)
