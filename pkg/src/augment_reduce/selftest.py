"""Invariant suites run by ``augment-reduce selftest``.

Each suite returns ``(passed, detail)``. ``fault="sign_flip"`` negates the
analytic gradients before they are compared, which must make the gradient
suite fail; it exists to show the checks can catch an error.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import scipy.sparse as sp
from scipy import special

from . import bounds
from .exact import exact_softmax_grad
from .model import LinearModel
from .noise import LocScale, NoiseKind
from .vem import LocalStore, global_gradient

GRAD_RTOL = 1e-5
FD_STEP = 1e-5
# central differences resolve gradients to ~1e-11 absolute; floor the
# relative-error denominator so near-zero gradients are judged fairly
REL_FLOOR = 1e-4


def _rel_err(analytic, numeric):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), REL_FLOOR))


def _fd(f, params):
    """Central differences of scalar ``f`` over every entry of every array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + FD_STEP
            up = f()
            p[i] = old - FD_STEP
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * FD_STEP)
        out.append(g)
    return out


def _instance(rng):
    k = int(rng.integers(3, 8))
    d = int(rng.integers(1, 5))
    n = 3
    X = sp.csr_matrix(rng.normal(size=(n, d)) * (rng.random((n, d)) < 0.7))
    labels = rng.integers(0, k, size=n)
    model = LinearModel(rng.normal(0, 0.5, (k, d)), rng.normal(0, 0.5, k))
    size = int(rng.integers(1, k))
    samples = bounds.sample_class_subsets(rng, labels, k, size)
    return X, labels, model, samples


def _psi_parts(model, X, labels, samples):
    psi = model.utilities(X)
    rows = np.arange(len(labels))
    return psi[rows, labels], psi[rows[:, None], samples]


def check_gradients(n_instances=100, seed=0, fault=None):
    rng = np.random.default_rng(seed)
    sign = -1.0 if fault == "sign_flip" else 1.0
    worst = {"softmax_w": 0.0, "general_w": 0.0, "general_nu": 0.0, "exact_w": 0.0}
    for _ in range(n_instances):
        X, labels, model, samples = _instance(rng)
        n, k = len(labels), model.n_classes
        scale = bounds.reduce_scale(k, samples.shape[1])
        batch = np.arange(n)
        params = [model.weights, model.biases]

        store = LocalStore(n, log_eta=rng.normal(1.0, 0.5, n))
        gw, gb, _ = global_gradient(model, X, labels, batch, samples, store, "softmax_ar", n)
        f = lambda: float(np.sum(bounds.softmax_batch(*_psi_parts(model, X, labels, samples), store.log_eta, scale)[0]))
        num = _fd(f, params)
        worst["softmax_w"] = max(worst["softmax_w"], _rel_err(sign * np.concatenate([gw.ravel(), gb]), np.concatenate([num[0].ravel(), num[1]])))

        kind = NoiseKind.GAUSSIAN if rng.random() < 0.5 else NoiseKind.LOGISTIC
        method = "probit_ar" if kind is NoiseKind.GAUSSIAN else "logistic_ar"
        eps = rng.normal(size=n)
        gw, gb, _ = global_gradient(model, X, labels, batch, samples, None, method, n, eps=eps)
        f = lambda: float(np.sum(bounds.general_batch(kind, eps, *_psi_parts(model, X, labels, samples), scale)[0]))
        num = _fd(f, params)
        worst["general_w"] = max(worst["general_w"], _rel_err(sign * np.concatenate([gw.ravel(), gb]), np.concatenate([num[0].ravel(), num[1]])))

        psi = model.utilities(X[0])[0]
        nu = np.array([rng.normal(), rng.normal()])
        u = float(rng.normal())
        g = bounds.mc_elbo_grad_nu(psi, labels[0], kind, LocScale(*nu), u, samples[0])

        def f_nu():
            loc = LocScale(*nu)
            eps0 = loc.mu + loc.scale * u
            h = 0.5 + 0.5 * math.log(2 * math.pi) if kind is NoiseKind.GAUSSIAN else 2.0
            return bounds.log_joint_estimate(psi, labels[0], kind, eps0, samples[0]) + h + math.log(loc.scale)

        worst["general_nu"] = max(worst["general_nu"], _rel_err(sign * g, _fd(f_nu, [nu])[0]))

        gw, gb, _ = exact_softmax_grad(model, X, labels)
        f = lambda: float(np.sum(special.log_softmax(model.utilities(X), axis=1)[np.arange(n), labels]))
        num = _fd(f, params)
        worst["exact_w"] = max(worst["exact_w"], _rel_err(sign * np.concatenate([gw.ravel(), gb]), np.concatenate([num[0].ravel(), num[1]])))
    ok = all(v <= GRAD_RTOL for v in worst.values())
    return ok, ", ".join(f"{k}={v:.2e}" for k, v in worst.items())


def check_bound_ordering(n_rows=1000, seed=0, fault=None):
    rng = np.random.default_rng(seed)
    worst_tight = 0.0
    violations = 0
    for _ in range(n_rows):
        k = int(rng.integers(2, 51))
        psi = rng.normal(0, 3, k)
        y = int(rng.integers(k))
        exact = bounds.exact_softmax_logprob(psi, y)
        star = bounds.softmax_eta_star(psi, y)
        worst_tight = max(worst_tight, abs(bounds.softmax_elbo(psi, y, star) - exact))
        for eta in np.exp(rng.normal(math.log(star), 2.0, 10)):
            violations += bounds.softmax_elbo(psi, y, eta) > exact + 1e-12
        ove = bounds.ove_bound(psi, y)
        if fault == "sign_flip":
            ove = -ove
        violations += ove > exact + 1e-12
    ok = violations == 0 and worst_tight < 1e-10
    return ok, f"max |tight gap|={worst_tight:.1e}, violations={violations}"


def check_unbiasedness(seed=0, fault=None):
    rng = np.random.default_rng(seed)
    k, n = 6, 4
    psi = rng.normal(0, 2, k)
    y = 1
    worst = 0.0
    for size in (1, 2, 5):
        subsets = [s for s in itertools.combinations(range(k), size) if y not in s]
        mean = np.mean([bounds.softmax_eta_tilde(psi, y, s) for s in subsets])
        worst = max(worst, abs(mean - bounds.softmax_eta_star(psi, y)) / bounds.softmax_eta_star(psi, y))

    X = sp.csr_matrix(rng.normal(size=(n, 3)))
    labels = rng.integers(0, k, size=n)
    model = LinearModel(rng.normal(0, 0.5, (k, 3)), rng.normal(0, 0.5, k))
    store = LocalStore(n, log_eta=rng.normal(1.0, 0.3, n))
    full_w, full_b, _ = global_gradient(
        model, X, labels, np.arange(n), np.array([[c for c in range(k) if c != lab] for lab in labels]), store, "softmax_ar", n
    )
    size = 2
    acc_w, acc_b, count = np.zeros_like(full_w), np.zeros_like(full_b), 0
    for batch in itertools.combinations(range(n), 2):
        choices = [[s for s in itertools.combinations(range(k), size) if labels[i] not in s] for i in batch]
        for combo in itertools.product(*choices):
            gw, gb, _ = global_gradient(model, X, labels, np.array(batch), np.array(combo), store, "softmax_ar", n)
            acc_w += gw
            acc_b += gb
            count += 1
    if fault == "sign_flip":
        acc_w = -acc_w
    worst = max(worst, _rel_err(np.concatenate([acc_w.ravel(), acc_b]) / count, np.concatenate([full_w.ravel(), full_b])))
    return worst < 1e-12, f"max relative deviation={worst:.1e}"


def run(quick=False, fault=None):
    """Run all suites; returns a list of ``(name, passed, detail, seconds)``."""
    suites = [
        ("gradient checks", lambda: check_gradients(10 if quick else 100, fault=fault)),
        ("bound ordering", lambda: check_bound_ordering(100 if quick else 1000, fault=fault)),
        ("unbiasedness enumeration", lambda: check_unbiasedness(fault=fault)),
    ]
    results = []
    for name, fn in suites:
        t0 = time.perf_counter()
        ok, detail = fn()
        results.append((name, ok, detail, time.perf_counter() - t0))
    return results
