"""Stochastic variational EM with class subsampling.

One iteration:

1. sample a minibatch ``B`` of observations and, for every ``n`` in it, a
   uniform subset ``S_n`` of the classes other than ``y_n``;
2. local (E) step on the per-observation variational parameters of ``B``;
3. global (M) step: ascend the subsampled bound in the weights, using the
   same ``S_n`` and, for the Monte Carlo models, a fresh draw of ``eps_n``.

``softmax_ar`` keeps a Gumbel factor ``q(eps) = Gumbel(log eta, 1)`` per
observation and updates ``eta`` by a noisy natural-gradient step.
``probit_ar`` and ``logistic_ar`` keep a location-scale factor and update it
with one-sample reparameterization gradients. ``ove`` and ``exact`` share
the loop but have no local state.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import special

from .bounds import (
    general_batch,
    log_eta_tilde_batch,
    ove_batch,
    reduce_scale,
    sample_class_subsets,
    softmax_batch,
)
from .model import DivergenceError, LinearModel
from .noise import NoiseKind, _entropy, _standard_sample, softplus
from .schedule import StepState, alpha_schedule, global_step_size

METHODS = ("softmax_ar", "probit_ar", "logistic_ar", "ove", "exact")
_METHOD_KIND = {
    "softmax_ar": NoiseKind.GUMBEL,
    "ove": NoiseKind.GUMBEL,
    "exact": NoiseKind.GUMBEL,
    "probit_ar": NoiseKind.GAUSSIAN,
    "logistic_ar": NoiseKind.LOGISTIC,
}
# softplus(_GAMMA_UNIT) == 1
_GAMMA_UNIT = math.log(math.e - 1.0)


@dataclass
class TrainConfig:
    method: str = "softmax_ar"
    batch_size: int = 500
    n_sampled: int = 100
    iterations: int = 1000
    rho0: float = 0.02
    rho_decay: float = 0.9
    rho_period: int = 2000
    # local step size scale; None picks 1 for softmax_ar and 0.01 otherwise
    alpha_scale: float | None = None
    alpha_power: float = 0.9
    # "visits": local step t counts the visits of each observation;
    # "iteration": t is the global iteration counter
    local_clock: str = "visits"
    seed: int = 0
    l2: float = 0.0
    weight_std: float = 0.1
    bias_std: float = 0.001

    @property
    def kind(self) -> NoiseKind:
        return _METHOD_KIND[self.method]

    def validate(self, n_obs: int, n_classes: int):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 1 <= self.batch_size <= n_obs:
            raise ValueError(f"batch size must be in [1, {n_obs}], got {self.batch_size}")
        if self.method != "exact" and not 1 <= self.n_sampled <= n_classes - 1:
            raise ValueError(f"class sample size must be in [1, {n_classes - 1}], got {self.n_sampled}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.local_clock not in ("visits", "iteration"):
            raise ValueError(f"unknown local clock {self.local_clock!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LocalStore:
    """Per-observation variational parameters.

    ``log_eta`` for the softmax path (``eta = exp(log_eta) > 0``), or
    ``mu``/``gamma`` for the location-scale path. ``visits`` counts local
    updates per observation.
    """

    n_obs: int
    log_eta: np.ndarray | None = None
    mu: np.ndarray | None = None
    gamma: np.ndarray | None = None
    visits: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.visits is None:
            self.visits = np.zeros(self.n_obs, dtype=np.int64)

    @classmethod
    def for_method(cls, method: str, n_obs: int, n_classes: int) -> "LocalStore":
        if method == "softmax_ar":
            # eta of a zero-gap utility vector: 1 + (K - 1)
            return cls(n_obs, log_eta=np.full(n_obs, math.log(n_classes)))
        if method in ("probit_ar", "logistic_ar"):
            return cls(n_obs, mu=np.zeros(n_obs), gamma=np.full(n_obs, _GAMMA_UNIT))
        return cls(n_obs)

    @property
    def eta(self):
        return None if self.log_eta is None else np.exp(self.log_eta)

    @property
    def scale(self):
        return None if self.gamma is None else softplus(self.gamma)

    def copy(self) -> "LocalStore":
        c = lambda a: None if a is None else a.copy()
        return LocalStore(self.n_obs, c(self.log_eta), c(self.mu), c(self.gamma), self.visits.copy())


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    wall_clock_s: float
    minibatch_elbo: float


@dataclass
class TrainResult:
    model: LinearModel
    store: LocalStore
    trace: list
    config: TrainConfig
    epoch_length: float
    elapsed_s: float

    @property
    def time_per_epoch_s(self) -> float:
        epochs = len(self.trace) / self.epoch_length
        return self.elapsed_s / epochs if epochs else float("nan")

    def elbo_trace(self) -> np.ndarray:
        return np.array([r.minibatch_elbo for r in self.trace])


def init_model(n_classes: int, n_features: int, config: TrainConfig) -> LinearModel:
    """Initial weights; depends only on the seed, so every method starts alike."""
    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
    return LinearModel.random(n_classes, n_features, init_rng, config.weight_std, config.bias_std, config.kind)


def _train_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])


def _alpha(config: TrainConfig, t):
    if config.alpha_scale is None:
        return alpha_schedule(t, "softmax" if config.method == "softmax_ar" else "general")
    return config.alpha_scale * (1.0 + np.asarray(t, dtype=float)) ** -config.alpha_power


def _batch_utilities(model, X, labels, batch, class_samples):
    cols = np.concatenate([labels[batch][:, None], class_samples], axis=1)
    X_b = X[batch]
    psi = model.gather_utilities(X_b, cols)
    return X_b, cols, psi[:, 0], psi[:, 1:]


# -- local steps ---------------------------------------------------------------

def local_step_softmax(model, X, labels, batch, class_samples, store: LocalStore, alpha, psi=None):
    """Noisy natural-gradient step ``eta <- (1 - alpha) eta + alpha eta_tilde``.

    ``alpha`` is a scalar or one value per batch entry. Only ``batch``
    entries change. Returns ``log(eta_tilde)`` for the batch.
    """
    if psi is None:
        _, _, psi_y, psi_s = _batch_utilities(model, X, labels, batch, class_samples)
    else:
        psi_y, psi_s = psi
    scale = reduce_scale(model.n_classes, class_samples.shape[1])
    log_tilde = log_eta_tilde_batch(psi_y, psi_s, scale)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), log_tilde.shape)
    with np.errstate(divide="ignore"):
        log_keep = np.log1p(-alpha)
        log_alpha = np.log(alpha)
    store.log_eta[batch] = np.logaddexp(log_keep + store.log_eta[batch], log_alpha + log_tilde)
    store.visits[batch] += 1
    return log_tilde


def local_step_general(model, X, labels, batch, class_samples, store: LocalStore, alpha, rng, kind, psi=None):
    """One reparameterization-gradient ascent step on ``(mu, gamma)`` per batch entry."""
    if psi is None:
        _, _, psi_y, psi_s = _batch_utilities(model, X, labels, batch, class_samples)
    else:
        psi_y, psi_s = psi
    scale_c = reduce_scale(model.n_classes, class_samples.shape[1])
    mu, gamma = store.mu[batch], store.gamma[batch]
    scale = softplus(gamma)
    u = _standard_sample(kind, rng, len(batch))
    eps = mu + scale * u
    _, _, _, d_eps = general_batch(kind, eps, psi_y, psi_s, scale_c)
    grad_gamma = (d_eps * u + 1.0 / scale) * special.expit(gamma)
    store.mu[batch] = mu + alpha * d_eps
    store.gamma[batch] = gamma + alpha * grad_gamma
    store.visits[batch] += 1


# -- global step -----------------------------------------------------------------

def global_gradient(model, X, labels, batch, class_samples, store, method, n_total, eps=None, l2=0.0, gathered=None):
    """Ascent direction for the weights from one minibatch.

    Returns ``(grad_w, grad_b, bound)`` where ``bound`` is the per-row bound
    estimate (softmax: at the stored ``eta``; Monte Carlo models: the
    log-joint estimate at ``eps`` without the entropy term; ``exact``: the
    exact log-probability). Gradients carry the ``N / |B|`` factor.
    ``gathered`` may pass in the batch utilities already computed for the
    local step.
    """
    batch = np.asarray(batch)
    factor = n_total / len(batch)
    if method == "exact":
        from .exact import exact_softmax_grad

        grad_w, grad_b, bound = exact_softmax_grad(model, X[batch], labels[batch])
        grad_w, grad_b = factor * grad_w, factor * grad_b
    else:
        if gathered is None:
            gathered = _batch_utilities(model, X, labels, batch, class_samples)
        X_b, cols, psi_y, psi_s = gathered
        scale = reduce_scale(model.n_classes, class_samples.shape[1])
        if method == "softmax_ar":
            bound, c_y, c_s = softmax_batch(psi_y, psi_s, store.log_eta[batch], scale)
        elif method == "ove":
            bound, c_y, c_s = ove_batch(psi_y, psi_s, scale)
        else:
            if eps is None:
                raise ValueError("Monte Carlo models need eps samples for the global step")
            bound, c_y, c_s, _ = general_batch(_METHOD_KIND[method], eps, psi_y, psi_s, scale)
        coef = factor * np.concatenate([c_y[:, None], c_s], axis=1)
        grad_w, grad_b = model.scatter_gradient(X_b, cols, coef)
    if l2:
        grad_w = grad_w - l2 * model.weights
    return grad_w, grad_b, bound


def global_step(model: LinearModel, grad_w, grad_b, schedule: StepState):
    """``w <- w + rho * g`` with the adaptive per-parameter step sizes."""
    steps = global_step_size(schedule, {"weights": grad_w, "biases": grad_b})
    model.weights += steps["weights"] * grad_w
    model.biases += steps["biases"] * grad_b
    return steps


# -- driver -----------------------------------------------------------------------

class Trainer:
    """Stateful single-run driver; ``step()`` performs one iteration."""

    def __init__(self, dataset, config: TrainConfig, callbacks: Iterable[Callable] = ()):
        config.validate(dataset.n_obs, dataset.n_classes)
        self.data = dataset
        self.config = config
        self.callbacks = list(callbacks)
        self.model = init_model(dataset.n_classes, dataset.n_features, config)
        self.store = LocalStore.for_method(config.method, dataset.n_obs, dataset.n_classes)
        self.schedule = StepState(config.rho0, config.rho_decay, config.rho_period)
        self.rng = _train_rng(config.seed)
        self.trace: list[MetricsRecord] = []
        self.iteration = 0
        self._clock = 0.0

    def step(self) -> MetricsRecord:
        cfg, data = self.config, self.data
        start = time.perf_counter()
        self.iteration += 1
        t = self.iteration
        n, k = data.n_obs, data.n_classes
        X, labels = data.X, data.labels
        batch = self.rng.choice(n, cfg.batch_size, replace=False)
        method = cfg.method
        eps = gathered = None
        entropy_sum = 0.0
        if method == "exact":
            samples = None
        else:
            samples = sample_class_subsets(self.rng, labels[batch], k, cfg.n_sampled)

        if method in ("softmax_ar", "probit_ar", "logistic_ar"):
            clock = self.store.visits[batch] + 1 if cfg.local_clock == "visits" else t
            alpha = _alpha(cfg, clock)
            gathered = _batch_utilities(self.model, X, labels, batch, samples)
            psi_y, psi_s = gathered[2:]
            if method == "softmax_ar":
                local_step_softmax(self.model, X, labels, batch, samples, self.store, alpha, psi=(psi_y, psi_s))
            else:
                local_step_general(self.model, X, labels, batch, samples, self.store, alpha, self.rng, cfg.kind, psi=(psi_y, psi_s))
                scale = softplus(self.store.gamma[batch])
                eps = self.store.mu[batch] + scale * _standard_sample(cfg.kind, self.rng, len(batch))
                entropy_sum = float(np.sum(_entropy(cfg.kind, scale)))

        grad_w, grad_b, bound = global_gradient(
            self.model, X, labels, batch, samples, self.store, method, n, eps=eps, l2=cfg.l2, gathered=gathered
        )
        elbo = n / len(batch) * (float(np.sum(bound)) + entropy_sum)
        if not (math.isfinite(elbo) and np.all(np.isfinite(grad_b)) and np.all(np.isfinite(grad_w))):
            raise DivergenceError(f"non-finite objective or gradient at iteration {t}", self._snapshot(elbo, grad_w, grad_b, batch))
        global_step(self.model, grad_w, grad_b, self.schedule)
        self._clock += time.perf_counter() - start
        record = MetricsRecord(t, self._clock, elbo)
        self.trace.append(record)
        for cb in self.callbacks:
            cb(record)
        return record

    def _snapshot(self, elbo, grad_w, grad_b, batch) -> dict:
        finite = lambda a: bool(np.all(np.isfinite(a)))
        return {
            "iteration": self.iteration,
            "method": self.config.method,
            "minibatch_elbo": elbo,
            "grad_w_finite": finite(grad_w),
            "grad_b_finite": finite(grad_b),
            "weights_finite": finite(self.model.weights),
            "biases_finite": finite(self.model.biases),
            "max_abs_bias": float(np.nanmax(np.abs(self.model.biases))),
            "batch_head": [int(i) for i in batch[:10]],
        }

    def run(self) -> TrainResult:
        for _ in range(self.config.iterations - self.iteration):
            self.step()
        return TrainResult(
            self.model,
            self.store,
            self.trace,
            self.config,
            self.data.n_obs / self.config.batch_size,
            self._clock,
        )


def train(dataset, config: TrainConfig, callbacks: Iterable[Callable] = ()) -> TrainResult:
    """Run ``config.iterations`` iterations of ``config.method`` on ``dataset``."""
    return Trainer(dataset, config, callbacks).run()


def full_bound(model: LinearModel, dataset, store: LocalStore, method: str, chunk: int = 2048) -> float:
    """Bound summed over the whole dataset with all classes (no subsampling).

    ``softmax_ar``: the softmax bound at the stored ``eta``; ``ove``: the
    one-vs-each bound; ``exact``: the exact log-likelihood.
    """
    total = 0.0
    for lo in range(0, dataset.n_obs, chunk):
        rows = np.arange(lo, min(lo + chunk, dataset.n_obs))
        psi = model.utilities(dataset.X[rows])
        y = dataset.labels[rows]
        psi_y = psi[np.arange(len(rows)), y]
        if method == "softmax_ar":
            log_star = special.logsumexp(psi - psi_y[:, None], axis=1)
            log_eta = store.log_eta[rows]
            total += float(np.sum(1.0 - log_eta - np.exp(log_star - log_eta)))
        elif method == "ove":
            d = np.logaddexp(0.0, psi - psi_y[:, None])
            # the k' = y term contributes log(2); remove it
            total += float(-(d.sum() - len(rows) * math.log(2.0)))
        elif method == "exact":
            total += float(np.sum(psi_y - special.logsumexp(psi, axis=1)))
        else:
            raise ValueError(f"no closed-form full bound for {method!r}")
    return total
