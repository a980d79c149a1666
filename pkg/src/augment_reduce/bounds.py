"""Exact class log-probabilities, augmented-model bounds and their gradients.

Single-row functions take a utility vector ``psi`` (length K) and the
observed class ``k``. The ``*_batch`` kernels operate on minibatches where
``psi_y`` has shape ``(B,)`` and the utilities of the sampled classes
``psi_s`` have shape ``(B, S)``; they return the bound estimate together
with its derivatives w.r.t. ``psi_y`` and ``psi_s``, which is all a linear
model needs to form weight gradients.

Subsampled estimates scale the class sum by ``(K - 1) / |S|`` so they are
unbiased for the full sum when ``S`` is a uniform subset of the K - 1
classes other than ``k``.

Large utility gaps: the softmax natural parameter ``eta`` is handled in log
space. ``log_softmax_eta_star`` is always finite; ``softmax_eta_star``
returns ``exp`` of it and therefore overflows to ``inf`` only when the true
value exceeds the double range.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import integrate, optimize, special

from .noise import (
    LocScale,
    NoiseKind,
    _dlog_cdf,
    _dlog_pdf,
    _entropy,
    _log_cdf,
    _log_pdf,
)

__all__ = [
    "QuadratureError",
    "check_row",
    "check_class_sample",
    "reduce_scale",
    "sample_class_subsets",
    "exact_softmax_logprob",
    "exact_marginal_quadrature",
    "log_softmax_eta_star",
    "softmax_eta_star",
    "softmax_eta_tilde",
    "softmax_elbo",
    "ove_bound",
    "log_joint_estimate",
    "mc_elbo",
    "mc_elbo_grad_nu",
    "mc_elbo_grad_w",
    "log_eta_tilde_batch",
    "softmax_batch",
    "ove_batch",
    "general_batch",
]


class QuadratureError(RuntimeError):
    pass


def check_row(psi, k):
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 1 or psi.size < 2:
        raise ValueError("psi must be a vector with at least two classes")
    if not np.all(np.isfinite(psi)):
        raise ValueError("psi must be finite")
    k = int(k)
    if not 0 <= k < psi.size:
        raise ValueError(f"label {k} outside [0, {psi.size})")
    return psi, k


def check_class_sample(s, k, n_classes):
    s = np.asarray(s, dtype=np.int64).ravel()
    if s.size == 0:
        raise ValueError("class sample must not be empty")
    if np.any(s < 0) or np.any(s >= n_classes):
        raise ValueError("class sample index out of range")
    if np.unique(s).size != s.size:
        raise ValueError("class sample indices must be distinct")
    if np.any(s == k):
        raise ValueError("class sample must not contain the observed label")
    return s


def reduce_scale(n_classes: int, n_sampled: int) -> float:
    return (n_classes - 1) / n_sampled


def _others(psi, k):
    return np.delete(psi, k)


def sample_class_subsets(rng: np.random.Generator, labels, n_classes: int, n_sampled: int):
    """Draw, per label, ``n_sampled`` distinct classes excluding that label.

    Returns an int array of shape ``(len(labels), n_sampled)``. Each row is
    a uniform subset of the other ``n_classes - 1`` classes (drawn without
    replacement). For small subsets relative to K, duplicates from a
    with-replacement draw are redrawn until none remain; the procedure is
    symmetric in the class labels, so the resulting subset is uniform.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_other = n_classes - 1
    if not 1 <= n_sampled <= n_other:
        raise ValueError(f"need 1 <= |S| <= K - 1, got |S|={n_sampled}, K={n_classes}")
    b = labels.size
    if n_sampled == n_other:
        idx = np.broadcast_to(np.arange(n_other), (b, n_other)).copy()
    elif 4 * n_sampled > n_other:
        keys = rng.random((b, n_other))
        idx = np.argpartition(keys, n_sampled - 1, axis=1)[:, :n_sampled]
    else:
        idx = rng.integers(0, n_other, size=(b, n_sampled), dtype=np.int32)
        rows = np.arange(b)
        while rows.size:
            sub = np.sort(idx[rows], axis=1)
            dup = np.zeros(sub.shape, dtype=bool)
            dup[:, 1:] = sub[:, 1:] == sub[:, :-1]
            n_dup = int(dup.sum())
            if n_dup:
                sub[dup] = rng.integers(0, n_other, size=n_dup, dtype=np.int32)
            idx[rows] = sub
            rows = rows[dup.any(axis=1)]
        idx = idx.astype(np.int64)
    # shift [0, K-2] onto {0..K-1} \ {label}
    return idx + (idx >= labels[:, None])


# -- exact quantities --------------------------------------------------------

def exact_softmax_logprob(psi, k) -> float:
    psi, k = check_row(psi, k)
    return float(psi[k] - special.logsumexp(psi))


def exact_marginal_quadrature(psi, k, kind: NoiseKind) -> float:
    """``log p(y=k | psi)`` by 1-D adaptive quadrature over the kept error.

    Integrates ``phi(e) * prod_{k'!=k} Phi(e + psi_k - psi_k')``. The
    integrand is log-concave, so it is rescaled by its maximum and the
    integration window extends from the mode until the log integrand has
    dropped by 60 nats on each side.
    """
    psi, k = check_row(psi, k)
    gaps = psi[k] - _others(psi, k)

    def log_f(e):
        e = np.asarray(e, dtype=float)
        return _log_pdf(kind, e) + _log_cdf(kind, e[..., None] + gaps).sum(-1)

    res = optimize.minimize_scalar(lambda e: -float(log_f(e)), bracket=(-1.0, 1.0))
    mode = float(res.x)
    top = float(log_f(mode))

    def edge(direction):
        step = 1.0
        while float(log_f(mode + direction * step)) > top - 60.0:
            step *= 2.0
            if step > 1e6:
                raise QuadratureError("integrand does not decay")
        return mode + direction * step

    lo, hi = edge(-1.0), edge(1.0)
    f = lambda e: math.exp(float(log_f(e)) - top)
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            left, _ = integrate.quad(f, lo, mode, epsabs=1e-13, epsrel=1e-12, limit=200)
            right, _ = integrate.quad(f, mode, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(f"quadrature did not converge: {exc}") from exc
    return math.log(left + right) + top


# -- softmax augmentation ----------------------------------------------------

def log_softmax_eta_star(psi, k) -> float:
    psi, k = check_row(psi, k)
    return float(special.logsumexp(psi - psi[k]))


def softmax_eta_star(psi, k) -> float:
    """Natural parameter making the softmax bound tight: ``sum_k' exp(psi_k' - psi_k)``."""
    with np.errstate(over="ignore"):
        return float(np.exp(log_softmax_eta_star(psi, k)))


def softmax_eta_tilde(psi, k, s) -> float:
    psi, k = check_row(psi, k)
    s = check_class_sample(s, k, psi.size)
    log_eta = log_eta_tilde_batch(psi[k], psi[s], reduce_scale(psi.size, s.size))
    with np.errstate(over="ignore"):
        return float(np.exp(log_eta))


def softmax_elbo(psi, k, eta) -> float:
    """``1 - log(eta) - eta_star / eta``, a lower bound on the softmax log-prob."""
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    log_eta = math.log(eta)
    return float(1.0 - log_eta - np.exp(log_softmax_eta_star(psi, k) - log_eta))


def ove_bound(psi, k, s=None) -> float:
    """One-vs-each bound ``sum_k' log sigmoid(psi_k - psi_k')``.

    With a class sample ``s`` the sum runs over ``s`` and is rescaled by
    ``(K - 1) / |s|``.
    """
    psi, k = check_row(psi, k)
    if s is None:
        others, scale = _others(psi, k), 1.0
    else:
        s = check_class_sample(s, k, psi.size)
        others, scale = psi[s], reduce_scale(psi.size, s.size)
    return float(-scale * np.logaddexp(0.0, others - psi[k]).sum())


# -- general augmentation (Monte Carlo) ---------------------------------------

def _general_kind(kind):
    if kind is NoiseKind.GUMBEL:
        raise ValueError("Monte Carlo bounds are for GAUSSIAN and LOGISTIC noise")


def log_joint_estimate(psi, k, kind: NoiseKind, eps, s=None):
    """``log phi(eps) + (K-1)/|S| * sum_{k' in S} log Phi(eps + psi_k - psi_k')``."""
    psi, k = check_row(psi, k)
    if s is None:
        others, scale = _others(psi, k), 1.0
    else:
        s = check_class_sample(s, k, psi.size)
        others, scale = psi[s], reduce_scale(psi.size, s.size)
    eps = np.asarray(eps, dtype=float)
    logp, *_ = general_batch(kind, eps, np.full(eps.shape, psi[k]), np.broadcast_to(others, eps.shape + others.shape), scale)
    return float(logp) if logp.ndim == 0 else logp


def mc_elbo(psi, k, kind: NoiseKind, nu: LocScale, eps_samples, analytic_entropy: bool = False) -> float:
    """Monte Carlo ELBO of the augmented model with ``q = kind(mu, scale)``.

    Averages ``log p(y, eps) - log q(eps)`` over ``eps_samples`` (all
    classes, no subsampling). With ``analytic_entropy`` the ``-log q`` term
    is replaced by the closed-form entropy of ``q``.
    """
    _general_kind(kind)
    eps = np.asarray(eps_samples, dtype=float).ravel()
    if eps.size == 0:
        raise ValueError("need at least one sample")
    logp = log_joint_estimate(psi, k, kind, eps)
    scale = nu.scale
    if analytic_entropy:
        return float(np.mean(logp) + _entropy(kind, scale))
    log_q = _log_pdf(kind, (eps - nu.mu) / scale) - math.log(scale)
    return float(np.mean(logp - log_q))


def mc_elbo_grad_nu(psi, k, kind: NoiseKind, nu: LocScale, u: float, s) -> np.ndarray:
    """One-sample reparameterization gradient of the subsampled ELBO.

    Returns the gradient w.r.t. ``(mu, gamma)`` of
    ``log p~(y, T(u; nu)) + H[q(nu)]``, with the softplus chain rule applied.
    """
    _general_kind(kind)
    psi, k = check_row(psi, k)
    s = check_class_sample(s, k, psi.size)
    scale = nu.scale
    eps = np.array([nu.mu + scale * u])
    _, _, _, d_eps = general_batch(kind, eps, psi[[k]], psi[s][None, :], reduce_scale(psi.size, s.size))
    d = float(d_eps[0])
    d_scale = d * u + 1.0 / scale
    return np.array([d, d_scale * nu.dscale_dgamma])


def mc_elbo_grad_w(psi, k, kind: NoiseKind, eps: float, s, x):
    """Gradient of ``(K-1)/|S| * sum_{k' in S} log Phi(eps + psi_k - psi_k')``.

    For a linear model ``psi = W x + b``. Returns ``(grad_W, grad_b)`` with
    shapes ``(K, D)`` and ``(K,)``; only rows ``k`` and ``s`` are nonzero.
    """
    psi, k = check_row(psi, k)
    s = check_class_sample(s, k, psi.size)
    x = np.asarray(x, dtype=float).ravel()
    _, c_y, c_s, _ = general_batch(kind, np.array([float(eps)]), psi[[k]], psi[s][None, :], reduce_scale(psi.size, s.size))
    coef = np.zeros(psi.size)
    coef[k] = c_y[0]
    coef[s] = c_s[0]
    return np.outer(coef, x), coef


# -- minibatch kernels ---------------------------------------------------------

def log_eta_tilde_batch(psi_y, psi_s, scale):
    """``log(1 + scale * sum exp(psi_s - psi_y))`` along the last axis."""
    d = np.asarray(psi_s) - np.asarray(psi_y, dtype=float)[..., None]
    top = d.max(axis=-1)
    lse = top + np.log(np.exp(d - top[..., None]).sum(axis=-1))
    return np.logaddexp(0.0, math.log(scale) + lse)


def softmax_batch(psi_y, psi_s, log_eta, scale):
    """Subsampled softmax bound at fixed ``eta`` and its utility gradients.

    Returns ``(bound, d_psi_y, d_psi_s)``.
    """
    w = scale * np.exp(psi_s - psi_y[..., None] - log_eta[..., None])
    total = w.sum(-1)
    bound = 1.0 - log_eta - np.exp(-log_eta) - total
    return bound, total, -w


def ove_batch(psi_y, psi_s, scale):
    d = psi_s - psi_y[..., None]
    bound = -scale * np.logaddexp(0.0, d).sum(-1)
    w = scale * special.expit(d)
    return bound, w.sum(-1), -w


def general_batch(kind: NoiseKind, eps, psi_y, psi_s, scale):
    """Log-joint estimate at ``eps`` and its gradients.

    Returns ``(log_p, d_psi_y, d_psi_s, d_eps)``.
    """
    z = eps[..., None] + psi_y[..., None] - psi_s
    log_cdf = _log_cdf(kind, z)
    g = scale * _dlog_cdf(kind, z, log_cdf)
    g_sum = g.sum(-1)
    log_p = _log_pdf(kind, eps) + scale * log_cdf.sum(-1)
    return log_p, g_sum, -g, _dlog_pdf(kind, eps) + g_sum
