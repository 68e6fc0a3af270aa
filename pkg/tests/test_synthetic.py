import numpy as np
import pytest

from statprune.errors import ValidationError
from statprune.formats import calib_to_bytes, model_to_bytes
from statprune.synthetic import gen_synthetic, planted_ratio


def test_same_seed_same_files():
    a = gen_synthetic(n=8, layers=1, heads=2, f=8, m=6, b=4, seed=3)
    b = gen_synthetic(n=8, layers=1, heads=2, f=8, m=6, b=4, seed=3)
    assert model_to_bytes(a[0]) == model_to_bytes(b[0])
    assert calib_to_bytes(a[1]) == calib_to_bytes(b[1])
    assert calib_to_bytes(a[2]) == calib_to_bytes(b[2])


def test_lengths_in_range():
    _, calib, hold = gen_synthetic(n=8, layers=1, heads=2, f=8, m=200, b=5, seed=0)
    for c in (calib, hold):
        assert c.lengths.min() >= 1 and c.lengths.max() <= 5


def test_planted_structure():
    model, _, _ = gen_synthetic(n=8, layers=1, heads=4, f=8, seed=1, planted="dup-heads")
    at = model.layers[0].attention
    assert np.array_equal(at.wq[:, 4:6], at.wq[:, 0:2])
    assert np.array_equal(at.wv[:, 4:6], 2 * at.wv[:, 0:2])
    model, _, _ = gen_synthetic(n=8, layers=1, heads=2, f=8, seed=1, planted="dup-neurons")
    w1 = model.layers[0].ffn.w1
    assert all(any(np.array_equal(w1[:, j], w1[:, i]) for i in range(6)) for j in (6, 7))
    assert planted_ratio(model, "none", 4) == 1.0


def test_invalid_dims():
    with pytest.raises(ValidationError):
        gen_synthetic(n=10, heads=4)
    with pytest.raises(ValidationError):
        gen_synthetic(f=0)
    with pytest.raises(ValidationError):
        gen_synthetic(planted="dup-layers")
