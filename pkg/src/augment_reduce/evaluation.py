"""Test-time metrics."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import special

from .noise import NoiseKind, _log_cdf, _log_pdf


def predict_label(model, x) -> int:
    """Class with the highest mean utility; ties go to the lowest index."""
    psi = model.utilities(x.reshape(1, -1) if np.ndim(x) == 1 else x)
    return int(np.argmax(psi[0]))


def predict(model, X, chunk: int = 4096) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.int64)
    for lo in range(0, X.shape[0], chunk):
        out[lo : lo + chunk] = np.argmax(model.utilities(X[lo : lo + chunk]), axis=1)
    return out


def _require_nonempty(dataset):
    if dataset.n_obs == 0:
        raise ValueError("empty dataset")


def accuracy(model, dataset) -> float:
    _require_nonempty(dataset)
    return float(np.mean(predict(model, dataset.X) == dataset.labels))


def test_loglik_softmax(model, dataset, chunk: int = 4096) -> float:
    """Mean exact softmax log-likelihood per datapoint."""
    _require_nonempty(dataset)
    total = 0.0
    for lo in range(0, dataset.n_obs, chunk):
        psi = model.utilities(dataset.X[lo : lo + chunk])
        y = dataset.labels[lo : lo + chunk]
        total += float(np.sum(psi[np.arange(len(y)), y] - special.logsumexp(psi, axis=1)))
    return total / dataset.n_obs


def log_marginal_is(psi, k, kind: NoiseKind, n_samples=1000, proposal_mean=5.0, proposal_std=5.0, rng=None):
    """Importance-sampling estimate of ``log p(y=k | psi)``.

    Plain (not self-normalized) average of
    ``phi(e) prod_{k'!=k} Phi(e + psi_k - psi_k') / N(e; mean, std)``
    with ``e`` drawn from the Gaussian proposal. Weights are accumulated in
    log space. Returns ``(log_estimate, standard_error_of_log)``; the error
    is the delta-method s.e. of the log of the mean weight.
    """
    rng = np.random.default_rng() if rng is None else rng
    psi = np.asarray(psi, dtype=float)
    gaps = psi[k] - np.delete(psi, k)
    e = proposal_mean + proposal_std * rng.standard_normal(n_samples)
    log_q = -0.5 * ((e - proposal_mean) / proposal_std) ** 2 - math.log(proposal_std) - 0.5 * math.log(2 * math.pi)
    log_w = _log_pdf(kind, e) + _log_cdf(kind, e[:, None] + gaps).sum(axis=1) - log_q
    top = log_w.max()
    if not np.isfinite(top):
        return -math.inf, math.inf
    w = np.exp(log_w - top)
    mean = w.mean()
    se = w.std(ddof=1) / math.sqrt(n_samples) if n_samples > 1 else math.inf
    return float(top + math.log(mean)), float(se / mean)


def test_loglik_is(model, dataset, kind: NoiseKind, n_samples=1000, proposal_mean=5.0, proposal_std=5.0, seed=0) -> float:
    """Mean per-datapoint log-likelihood, each marginal estimated by importance sampling.

    Datapoint ``i`` uses its own generator seeded from ``(seed, i)``, so the
    value does not depend on evaluation order.
    """
    _require_nonempty(dataset)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total, n_zero = 0.0, 0
    for lo in range(0, dataset.n_obs, 256):
        psi = model.utilities(dataset.X[lo : lo + 256])
        for j, row in enumerate(psi):
            i = lo + j
            rng = np.random.default_rng([seed, i])
            value, _ = log_marginal_is(row, dataset.labels[i], kind, n_samples, proposal_mean, proposal_std, rng)
            if value == -math.inf:
                n_zero += 1
            total += value
    if n_zero:
        warnings.warn(f"{n_zero} datapoint(s) had all-zero importance weights", RuntimeWarning, stacklevel=2)
    return total / dataset.n_obs


def test_loglik(model, dataset, **is_kwargs) -> float:
    """Exact log-likelihood for softmax models, importance sampling otherwise."""
    if model.kind is NoiseKind.GUMBEL:
        return test_loglik_softmax(model, dataset)
    return test_loglik_is(model, dataset, model.kind, **is_kwargs)


def prob_estimation_error(model, true_probs) -> float:
    """Mean absolute error between ``softmax(biases)`` and ``true_probs``."""
    true_probs = np.asarray(true_probs, dtype=float)
    if true_probs.shape != model.biases.shape:
        raise ValueError(f"expected {model.biases.shape[0]} probabilities, got {true_probs.size}")
    return float(np.mean(np.abs(special.softmax(model.biases) - true_probs)))


# keep pytest from collecting these when imported into test modules
for _f in (test_loglik_softmax, test_loglik_is, test_loglik):
    _f.__test__ = False
