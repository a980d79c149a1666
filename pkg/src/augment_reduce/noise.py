"""Error distributions of the additive-utility model.

Each observed class is the argmax of ``psi_k + eps_k`` with i.i.d. errors.
The choice of error law selects the categorical model:

* ``GUMBEL``   -> softmax
* ``GAUSSIAN`` -> multinomial probit
* ``LOGISTIC`` -> multinomial logistic

All functions work elementwise on numpy arrays (or scalars) of the
*standard* distribution, i.e. location 0 and unit scale. Location-scale
variational factors are described by :class:`LocScale`, whose scale is the
softplus of an unconstrained parameter.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "NoiseKind",
    "LocScale",
    "softplus",
    "log_pdf",
    "dlog_pdf",
    "log_cdf",
    "dlog_cdf",
    "standard_sample",
    "reparam_sample",
    "entropy_and_grad",
    "entropy",
    "log_density",
]

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
EULER_GAMMA = 0.5772156649015329

# below this point the derivative of the Gaussian log-CDF uses the
# Mills-ratio continued fraction; 60 terms give full double precision for x >= 8
_GAUSS_TAIL = -8.0
_CF_TERMS = 60


class NoiseKind(enum.Enum):
    GUMBEL = "gumbel"
    GAUSSIAN = "gaussian"
    LOGISTIC = "logistic"

    @classmethod
    def from_model(cls, model: str) -> "NoiseKind":
        """Map a model name (``softmax``/``probit``/``logistic``) to its noise."""
        table = {"softmax": cls.GUMBEL, "probit": cls.GAUSSIAN, "logistic": cls.LOGISTIC}
        try:
            return table[model]
        except KeyError:
            raise ValueError(f"unknown model {model!r}") from None

    @property
    def model(self) -> str:
        return {"gumbel": "softmax", "gaussian": "probit", "logistic": "logistic"}[self.value]


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class LocScale:
    """Location ``mu`` and unconstrained scale ``gamma``; scale = softplus(gamma)."""

    mu: float
    gamma: float

    @property
    def scale(self) -> float:
        return float(softplus(self.gamma))

    @property
    def dscale_dgamma(self) -> float:
        return float(special.expit(self.gamma))

    @classmethod
    def from_scale(cls, mu: float, scale: float) -> "LocScale":
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        # inverse softplus, stable for large scale
        gamma = scale + math.log(-math.expm1(-scale))
        return cls(float(mu), float(gamma))


def _check_finite(eps):
    eps = np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(eps)):
        raise ValueError("noise argument must be finite")
    return eps


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


# -- kernels (no input validation; used directly by the trainers) -----------

def _gauss_mills_tail(x):
    """Mills ratio ``Phi(-x) / phi(x)`` for ``x >= 8`` by continued fraction."""
    t = np.array(x, dtype=float, copy=True)
    for k in range(_CF_TERMS, 0, -1):
        t = x + k / t
    return 1.0 / t


def _log_pdf(kind, eps):
    if kind is NoiseKind.GUMBEL:
        return -eps - np.exp(-eps)
    if kind is NoiseKind.GAUSSIAN:
        return -0.5 * eps * eps - LOG_SQRT_2PI
    return -softplus(eps) - softplus(-eps)


def _dlog_pdf(kind, eps):
    if kind is NoiseKind.GUMBEL:
        return np.expm1(-eps)
    if kind is NoiseKind.GAUSSIAN:
        return -eps
    return special.expit(-eps) - special.expit(eps)


def _log_cdf(kind, eps):
    if kind is NoiseKind.GUMBEL:
        return -np.exp(-eps)
    if kind is NoiseKind.LOGISTIC:
        return -softplus(-eps)
    return special.log_ndtr(eps)


def _dlog_cdf(kind, eps, log_cdf=None):
    """``d/de log Phi(e)``; ``log_cdf`` may pass in ``_log_cdf(kind, eps)``."""
    if kind is NoiseKind.GUMBEL:
        return np.exp(-eps)
    if kind is NoiseKind.LOGISTIC:
        return special.expit(-eps)
    eps = np.asarray(eps, dtype=float)
    if log_cdf is None:
        log_cdf = special.log_ndtr(eps)
    out = np.exp(-0.5 * eps * eps - LOG_SQRT_2PI - log_cdf)
    tail = eps < _GAUSS_TAIL
    if tail.any():
        # the ratio of two tiny numbers loses digits; use the Mills ratio directly
        out[tail] = 1.0 / _gauss_mills_tail(-eps[tail])
    return out


def _standard_sample(kind, rng, size=None):
    if kind is NoiseKind.GAUSSIAN:
        return rng.standard_normal(size)
    # inverse CDF on (0, 1): 1 - U is never 0, the clip keeps it below 1
    u = np.minimum(1.0 - rng.random(size), 1.0 - 2.0**-53)
    if kind is NoiseKind.GUMBEL:
        return -np.log(-np.log(u))
    return np.log(u) - np.log1p(-u)


def _entropy(kind, scale):
    if kind is NoiseKind.GAUSSIAN:
        return 0.5 + LOG_SQRT_2PI + np.log(scale)
    if kind is NoiseKind.LOGISTIC:
        return 2.0 + np.log(scale)
    raise ValueError("entropy is only defined here for GAUSSIAN and LOGISTIC")


# -- public API --------------------------------------------------------------

def log_pdf(kind: NoiseKind, eps):
    """Log density of the standard error distribution."""
    return _out(_log_pdf(kind, _check_finite(eps)))


def dlog_pdf(kind: NoiseKind, eps):
    return _out(_dlog_pdf(kind, _check_finite(eps)))


def log_cdf(kind: NoiseKind, eps):
    """Log CDF of the standard error distribution.

    The Gaussian branch uses a continued fraction for the Mills ratio below
    ``eps = -8`` so the result stays accurate far into the left tail.
    """
    return _out(_log_cdf(kind, _check_finite(eps)))


def dlog_cdf(kind: NoiseKind, eps):
    """Derivative of :func:`log_cdf`, i.e. ``pdf / cdf``."""
    return _out(_dlog_cdf(kind, _check_finite(eps)))


def standard_sample(kind: NoiseKind, rng: np.random.Generator, size=None):
    """Draw from the standard (location 0, unit scale) distribution."""
    return _out(_standard_sample(kind, rng, size))


def reparam_sample(kind: NoiseKind, nu: LocScale, u):
    """Map standard draws ``u`` to ``mu + scale * u``.

    The Jacobian w.r.t. ``(mu, gamma)`` is ``(1, u * sigmoid(gamma))``.
    ``kind`` is accepted for symmetry with the other functions; the
    transform is the same affine map for every location-scale family.
    """
    del kind
    return _out(nu.mu + nu.scale * np.asarray(u, dtype=float))


def entropy(kind: NoiseKind, scale):
    return _out(_entropy(kind, np.asarray(scale, dtype=float)))


def entropy_and_grad(kind: NoiseKind, nu: LocScale) -> tuple[float, tuple[float, float]]:
    """Entropy of ``q(eps; nu)`` and its gradient w.r.t. ``(mu, scale)``.

    The gradient is with respect to the realized scale, not ``gamma``;
    callers multiply by ``sigmoid(gamma)`` when they need the latter.
    Not available for ``GUMBEL`` (the softmax path has a closed-form bound).
    """
    scale = nu.scale
    return float(_entropy(kind, scale)), (0.0, 1.0 / scale)


def log_density(kind: NoiseKind, eps, nu: LocScale):
    """Log density of the location-scale distribution ``q(eps; nu)``."""
    eps = _check_finite(eps)
    scale = nu.scale
    return _out(_log_pdf(kind, (eps - nu.mu) / scale) - math.log(scale))
