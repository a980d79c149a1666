"""Full-softmax maximum likelihood, the reference for small K."""

from __future__ import annotations

import numpy as np
from scipy import special


def exact_softmax_grad(model, X, labels):
    """Gradient of ``sum_n log softmax(psi_n)[y_n]`` w.r.t. ``(W, b)``.

    Returns ``(grad_w, grad_b, logp)`` with ``logp`` the per-row log-probabilities.
    """
    labels = np.asarray(labels)
    psi = model.utilities(X)
    rows = np.arange(len(labels))
    log_norm = special.logsumexp(psi, axis=1)
    coef = -np.exp(psi - log_norm[:, None])
    coef[rows, labels] += 1.0
    grad_b = coef.sum(axis=0)
    grad_w = np.asarray(X.T @ coef).T if model.n_features else np.zeros((model.n_classes, 0))
    return grad_w, grad_b, psi[rows, labels] - log_norm


def train_exact(dataset, config, callbacks=()):
    """Minibatch ascent on the exact log-likelihood.

    Same initialization, minibatching and step-size schedule as the
    augment-and-reduce trainers. Returns ``(result, epoch_loglik)`` where
    ``epoch_loglik`` lists the mean training log-likelihood after each
    completed epoch (``N / |B|`` iterations, rounded up).
    """
    from dataclasses import replace

    from .vem import Trainer, TrainResult, full_bound

    config = replace(config, method="exact")
    trainer = Trainer(dataset, config, callbacks)
    epoch = max(1, -(-dataset.n_obs // config.batch_size))
    epoch_loglik = []
    for _ in range(config.iterations):
        trainer.step()
        if trainer.iteration % epoch == 0:
            epoch_loglik.append(full_bound(trainer.model, dataset, trainer.store, "exact") / dataset.n_obs)
    result = TrainResult(
        trainer.model, trainer.store, trainer.trace, config, dataset.n_obs / config.batch_size, trainer._clock
    )
    return result, epoch_loglik
