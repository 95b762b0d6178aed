import numpy as np
import pytest
import torch

from cediff.adversarial import Classifier, classify
from cediff.checkpoint import MAGIC, load_checkpoint, load_state_dict, save_checkpoint, save_module
from cediff.errors import FormatError


def test_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, "thing", tensors, {"dim": 3}, {"beta_min": 0.1}, {"note": "x"})
    header, back = load_checkpoint(p, kind="thing")
    assert header["arch"] == {"dim": 3} and header["schedule"] == {"beta_min": 0.1}
    assert all(np.array_equal(tensors[k], back[k]) for k in tensors)
    assert p.read_bytes()[:4] == MAGIC


def test_module_round_trip_preserves_predictions(tmp_path, rng):
    torch.manual_seed(0)
    m = Classifier(4, 3, hidden=8)
    p = tmp_path / "c.ckpt"
    save_module(p, "classifier", m, m.arch())
    header, tensors = load_checkpoint(p, "classifier")
    m2 = Classifier(**header["arch"])
    m2.load_state_dict(load_state_dict(tensors))
    x = rng.normal(size=(5, 4))
    assert np.array_equal(classify(m, x)[1], classify(m2, x)[1])


def test_save_is_byte_deterministic(tmp_path):
    t = {"w": np.ones((2, 2), np.float32)}
    save_checkpoint(tmp_path / "1", "k", t, {"x": 1})
    save_checkpoint(tmp_path / "2", "k", t, {"x": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_corruption_is_located(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, "k", {"w": np.ones(10, np.float32)})
    good = p.read_bytes()
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError) as e:
        load_checkpoint(p)
    assert e.value.offset == 0
    p.write_bytes(good[:-8])
    with pytest.raises(FormatError, match="truncated payload") as e:
        load_checkpoint(p)
    assert e.value.offset == len(good) - 40
    p.write_bytes(good + b"\0")
    with pytest.raises(FormatError, match="trailing") as e:
        load_checkpoint(p)
    assert e.value.offset == len(good)
    p.write_bytes(good)
    with pytest.raises(FormatError, match="expected kind"):
        load_checkpoint(p, kind="other")
