import math

import numpy as np
import pytest
import scipy.sparse as sp

from augment_reduce import bounds, data, evaluation
from augment_reduce.model import LinearModel
from augment_reduce.noise import NoiseKind


def test_uniform_model_metrics():
    ds = data.Dataset(sp.csr_matrix((100, 3)), np.arange(100) % 10, 10)
    m = LinearModel.zeros(10, 3)
    assert evaluation.test_loglik_softmax(m, ds) == pytest.approx(-math.log(10))
    assert evaluation.accuracy(m, ds) == pytest.approx(0.1)  # ties go to class 0


def test_predict_label_ties_lowest():
    m = LinearModel(np.zeros((3, 2)), np.array([1.0, 2.0, 2.0]))
    assert evaluation.predict_label(m, np.array([0.0, 0.0])) == 1


@pytest.mark.parametrize("kind", [NoiseKind.GAUSSIAN, NoiseKind.LOGISTIC, NoiseKind.GUMBEL])
def test_is_agrees_with_quadrature(kind, rng):
    psi = rng.normal(0, 1.5, 6)
    exact = bounds.exact_marginal_quadrature(psi, 3, kind)
    est, se = evaluation.log_marginal_is(psi, 3, kind, 20_000, rng=rng)
    assert abs(est - exact) < 4 * se


def test_is_dataset_level_seeded(rng):
    ds = data.synth_linear(6, 10, 40, seed=3)
    m = LinearModel(rng.normal(size=(ds.n_classes, 10)), rng.normal(size=ds.n_classes), NoiseKind.GAUSSIAN)
    a = evaluation.test_loglik(m, ds, n_samples=200, seed=4)
    assert a == evaluation.test_loglik(m, ds, n_samples=200, seed=4)
    assert a != evaluation.test_loglik(m, ds, n_samples=200, seed=5)
    psi = m.utilities(ds.X)
    exact = np.mean([bounds.exact_marginal_quadrature(psi[i], ds.labels[i], NoiseKind.GAUSSIAN) for i in range(ds.n_obs)])
    assert a == pytest.approx(exact, abs=0.05)


def test_huge_gap_stays_finite():
    ds = data.Dataset(sp.csr_matrix((1, 1)), [0], 2)
    m = LinearModel(np.zeros((2, 1)), np.array([-1e3, 1e3]), NoiseKind.GAUSSIAN)
    val = evaluation.test_loglik_is(m, ds, NoiseKind.GAUSSIAN, n_samples=50)
    assert math.isfinite(val) and val < -1e5


@pytest.mark.filterwarnings("ignore:overflow")
def test_all_zero_weights_warn():
    # the Gumbel density underflows to zero far in its left tail
    ds = data.Dataset(sp.csr_matrix((1, 1)), [0], 2)
    m = LinearModel.zeros(2, 1)
    with pytest.warns(RuntimeWarning, match="all-zero"):
        val = evaluation.test_loglik_is(m, ds, NoiseKind.GUMBEL, n_samples=50, proposal_mean=-1e3, proposal_std=1.0)
    assert val == -math.inf


def test_errors():
    m = LinearModel.zeros(3, 1)
    with pytest.raises(ValueError):
        evaluation.accuracy(m, data.Dataset(sp.csr_matrix((0, 1)), [], 3))
    with pytest.raises(ValueError):
        evaluation.prob_estimation_error(m, [0.5, 0.5])
    assert evaluation.prob_estimation_error(m, np.full(3, 1 / 3)) == pytest.approx(0.0)
