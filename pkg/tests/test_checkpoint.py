import numpy as np
import pytest

from focmil.checkpoint import load_checkpoint, save_checkpoint
from focmil.nncore import build_mlp, mlp_forward


def make_nets(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "alpha": build_mlp([4, 8, 3], rng, final_activation="softmax", dropout_rate=0.2),
        "beta": build_mlp([3, 5, 1], rng, final_activation="sigmoid"),
    }


def test_roundtrip_is_exact(tmp_path):
    nets = make_nets()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, nets, seed=42, extra={"pool": "mean", "flags": [True, False]})
    loaded, seed, extra = load_checkpoint(path)
    assert seed == 42
    assert extra == {"pool": "mean", "flags": [True, False]}
    assert list(loaded) == ["alpha", "beta"]
    for name in nets:
        for a, b in zip(nets[name].layers, loaded[name].layers):
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)
            assert a.activation == b.activation
        assert nets[name].dropout_rate == loaded[name].dropout_rate


def test_roundtrip_preserves_forward_bits(tmp_path):
    nets = make_nets(3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, nets, seed=0)
    loaded, _, _ = load_checkpoint(path)
    x = np.random.default_rng(9).normal(size=4)
    a, _ = mlp_forward(nets["alpha"], x)
    b, _ = mlp_forward(loaded["alpha"], x)
    np.testing.assert_array_equal(a, b)


def test_identical_models_identical_bytes(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, make_nets(7), seed=1)
    save_checkpoint(p2, make_nets(7), seed=1)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_nets(), seed=0)
    blob = path.read_bytes()
    path.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(Exception):
        load_checkpoint(path)
