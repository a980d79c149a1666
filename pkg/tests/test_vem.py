import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import special

from augment_reduce import bounds, data
from augment_reduce.exact import exact_softmax_grad, train_exact
from augment_reduce.model import DivergenceError, LinearModel
from augment_reduce.vem import (
    METHODS,
    LocalStore,
    TrainConfig,
    Trainer,
    full_bound,
    global_gradient,
    init_model,
    local_step_general,
    local_step_softmax,
    train,
)
from augment_reduce.noise import NoiseKind


@pytest.fixture(scope="module")
def small():
    return data.synth_linear(12, 15, 400, seed=5)


def test_config_validation(small):
    for bad in (
        dict(method="nope"),
        dict(batch_size=0),
        dict(batch_size=401),
        dict(n_sampled=small.n_classes),
        dict(iterations=0),
        dict(l2=-1.0),
        dict(local_clock="wall"),
    ):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate(small.n_obs, small.n_classes)


def test_init_shared_across_methods():
    models = [init_model(10, 4, TrainConfig(method=m, seed=3)) for m in METHODS]
    for m in models[1:]:
        assert np.array_equal(m.weights, models[0].weights)
        assert np.array_equal(m.biases, models[0].biases)
    assert models[METHODS.index("probit_ar")].kind is NoiseKind.GAUSSIAN


def test_local_store_init():
    st = LocalStore.for_method("softmax_ar", 5, 7)
    np.testing.assert_allclose(st.eta, 7.0)
    st = LocalStore.for_method("probit_ar", 5, 7)
    np.testing.assert_allclose(st.scale, 1.0)
    assert LocalStore.for_method("ove", 5, 7).log_eta is None


def test_local_softmax_step_is_convex_combination(rng):
    m = LinearModel(rng.normal(size=(6, 3)), rng.normal(size=6))
    X = sp.csr_matrix(rng.normal(size=(4, 3)))
    labels = np.array([0, 1, 2, 3])
    store = LocalStore(4, log_eta=np.log(np.array([1.5, 2.0, 3.0, 4.0])))
    before = store.eta.copy()
    batch = np.array([1, 3])
    s = bounds.sample_class_subsets(rng, labels[batch], 6, 2)
    log_tilde = local_step_softmax(m, X, labels, batch, s, store, 0.25)
    np.testing.assert_allclose(store.eta[batch], 0.75 * before[batch] + 0.25 * np.exp(log_tilde))
    assert store.eta[0] == before[0] and store.visits.tolist() == [0, 1, 0, 1]
    local_step_softmax(m, X, labels, batch, s, store, 1.0)
    np.testing.assert_allclose(store.log_eta[batch], log_tilde)


def test_local_softmax_reaches_optimum_with_all_classes(rng):
    m = LinearModel(rng.normal(size=(5, 2)), rng.normal(size=5))
    X = sp.csr_matrix(rng.normal(size=(3, 2)))
    labels = np.array([4, 0, 2])
    store = LocalStore.for_method("softmax_ar", 3, 5)
    s = bounds.sample_class_subsets(rng, labels, 5, 4)
    local_step_softmax(m, X, labels, np.arange(3), s, store, 1.0)
    psi = m.utilities(X)
    for i in range(3):
        assert store.log_eta[i] == pytest.approx(bounds.log_softmax_eta_star(psi[i], labels[i]))


def test_local_general_step_improves_bound(rng):
    m = LinearModel(np.zeros((5, 1)), np.array([2.0, 0.0, -1.0, 0.5, 0.0]), NoiseKind.GAUSSIAN)
    X = sp.csr_matrix(np.ones((1, 1)))
    labels = np.array([2])
    store = LocalStore.for_method("probit_ar", 1, 5)
    s = np.array([[0, 1, 3, 4]])
    draws = np.random.default_rng(0).standard_normal(20_000)
    psi = m.utilities(X)[0]

    def elbo():
        nu = bounds.LocScale(store.mu[0], store.gamma[0])
        return bounds.mc_elbo(psi, 2, NoiseKind.GAUSSIAN, nu, nu.mu + nu.scale * draws, analytic_entropy=True)

    start = elbo()
    for _ in range(300):
        local_step_general(m, X, labels, np.array([0]), s, store, 0.05, rng, NoiseKind.GAUSSIAN)
    assert elbo() > start + 0.5
    assert elbo() < bounds.exact_marginal_quadrature(psi, 2, NoiseKind.GAUSSIAN)


def test_global_gradient_l2_and_factor(rng):
    m = LinearModel(rng.normal(size=(4, 2)), rng.normal(size=4))
    X = sp.csr_matrix(rng.normal(size=(6, 2)))
    labels = rng.integers(0, 4, 6)
    batch = np.array([0, 2, 5])
    s = bounds.sample_class_subsets(rng, labels[batch], 4, 3)
    g1, b1, _ = global_gradient(m, X, labels, batch, s, None, "ove", 3)
    g2, b2, _ = global_gradient(m, X, labels, batch, s, None, "ove", 6, l2=0.5)
    np.testing.assert_allclose(b2, 2 * b1)
    np.testing.assert_allclose(g2, 2 * g1 - 0.5 * m.weights)


def test_exact_grad_matches_dense(rng):
    m = LinearModel(rng.normal(size=(4, 3)), rng.normal(size=4))
    X = rng.normal(size=(5, 3))
    y = rng.integers(0, 4, 5)
    gw, gb, logp = exact_softmax_grad(m, sp.csr_matrix(X), y)
    p = special.softmax(X @ m.weights.T + m.biases, axis=1)
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(gw, (onehot - p).T @ X)
    np.testing.assert_allclose(gb, (onehot - p).sum(0))
    np.testing.assert_allclose(logp, np.log(p[np.arange(5), y]))


@pytest.mark.parametrize("method", METHODS)
def test_every_method_trains(method, small):
    cfg = TrainConfig(method=method, batch_size=50, n_sampled=4, iterations=200, seed=1)
    res = train(small, cfg)
    assert len(res.trace) == 200 and res.epoch_length == 8.0
    elbo = res.elbo_trace()
    assert np.all(np.isfinite(elbo))
    assert np.mean(elbo[-20:]) > np.mean(elbo[:20])
    assert np.all(np.diff([r.wall_clock_s for r in res.trace]) >= 0)


def test_training_deterministic(small):
    cfg = TrainConfig(method="probit_ar", batch_size=40, n_sampled=3, iterations=50, seed=9)
    a, b = train(small, cfg), train(small, cfg)
    assert np.array_equal(a.elbo_trace(), b.elbo_trace())
    assert a.model.to_bytes() == b.model.to_bytes()
    c = train(small, replace(cfg, seed=10))
    assert not np.array_equal(a.elbo_trace(), c.elbo_trace())


def test_callbacks_see_every_record(small):
    seen = []
    train(small, TrainConfig(batch_size=40, n_sampled=3, iterations=7), callbacks=[seen.append])
    assert [r.iteration for r in seen] == list(range(1, 8))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_snapshot(small):
    cfg = TrainConfig(method="ove", batch_size=40, n_sampled=3, iterations=5, rho0=1e300)
    tr = Trainer(small, cfg)
    tr.model.biases[::2] = 1e308
    tr.model.biases[1::2] = -1e308
    with pytest.raises(DivergenceError) as info:
        tr.run()
    assert info.value.snapshot["iteration"] >= 1
    assert "biases_finite" in info.value.snapshot


def test_full_bound_ordering(small):
    res = train(small, TrainConfig(method="softmax_ar", batch_size=50, n_sampled=4, iterations=100))
    exact = full_bound(res.model, small, res.store, "exact")
    assert full_bound(res.model, small, res.store, "softmax_ar") <= exact
    assert full_bound(res.model, small, res.store, "ove") <= exact
    with pytest.raises(ValueError):
        full_bound(res.model, small, res.store, "probit_ar")


def test_train_exact_epochs(small):
    res, per_epoch = train_exact(small, TrainConfig(batch_size=100, iterations=40, seed=2))
    assert res.config.method == "exact"
    assert len(per_epoch) == 10
    assert per_epoch[-1] > per_epoch[0]
    assert per_epoch[0] > -math.log(small.n_classes) - 1.0
