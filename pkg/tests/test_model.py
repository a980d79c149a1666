import struct

import numpy as np
import pytest
import scipy.sparse as sp

from augment_reduce.model import LinearModel
from augment_reduce.noise import NoiseKind


def test_utilities_and_gather(rng):
    m = LinearModel(rng.normal(size=(5, 4)), rng.normal(size=5))
    X = sp.random(6, 4, density=0.5, format="csr", random_state=1)
    full = X @ m.weights.T + m.biases
    np.testing.assert_allclose(m.utilities(X), full)
    cols = rng.integers(0, 5, size=(6, 3))
    np.testing.assert_allclose(m.gather_utilities(X, cols), np.take_along_axis(full, cols, axis=1))


def test_scatter_gradient_matches_dense(rng):
    m = LinearModel.zeros(5, 4)
    X = sp.random(6, 4, density=0.5, format="csr", random_state=2)
    cols = np.array([[0, 1], [1, 2], [0, 0], [4, 3], [2, 2], [1, 4]])
    coef = rng.normal(size=cols.shape)
    dense = np.zeros((6, 5))
    np.add.at(dense, (np.arange(6)[:, None], cols), coef)
    gw, gb = m.scatter_gradient(X, cols, coef)
    np.testing.assert_allclose(gw, dense.T @ X.toarray(), atol=1e-14)
    np.testing.assert_allclose(gb, dense.sum(0), atol=1e-14)


def test_binary_roundtrip(tmp_path, rng):
    m = LinearModel(rng.normal(size=(3, 2)), rng.normal(size=3), NoiseKind.LOGISTIC)
    m.save(tmp_path / "m.bin")
    back = LinearModel.load(tmp_path / "m.bin")
    assert back.kind is NoiseKind.LOGISTIC
    assert np.array_equal(back.weights, m.weights) and np.array_equal(back.biases, m.biases)
    blob = (tmp_path / "m.bin").read_bytes()
    assert blob[:4] == b"ARLM"
    assert struct.unpack("<H", blob[4:6])[0] == 1
    assert len(blob) == 24 + 8 * (6 + 3)


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate"])
def test_binary_rejects_corruption(mutate, rng):
    blob = bytearray(LinearModel(rng.normal(size=(2, 2)), np.zeros(2)).to_bytes())
    if mutate == "magic":
        blob[0:4] = b"XXXX"
    elif mutate == "version":
        blob[4] = 99
    else:
        blob = blob[:-3]
    with pytest.raises(ValueError):
        LinearModel.from_bytes(bytes(blob))


def test_check_finite():
    m = LinearModel.zeros(2, 1)
    m.biases[0] = np.nan
    with pytest.raises(FloatingPointError):
        m.check_finite()
