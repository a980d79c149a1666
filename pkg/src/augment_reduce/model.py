"""Linear utility model ``psi_nk = w_k . x_n + b_k`` over sparse features."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .noise import NoiseKind

MAGIC = b"ARLM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQQ")
_KIND_CODES = {NoiseKind.GUMBEL: 0, NoiseKind.GAUSSIAN: 1, NoiseKind.LOGISTIC: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class DivergenceError(FloatingPointError):
    """Raised when parameters or objectives stop being finite."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class LinearModel:
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    kind: NoiseKind = NoiseKind.GUMBEL

    @property
    def n_classes(self) -> int:
        return self.biases.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, n_classes: int, n_features: int, kind: NoiseKind = NoiseKind.GUMBEL) -> "LinearModel":
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes), kind)

    @classmethod
    def random(cls, n_classes, n_features, rng, weight_std=0.1, bias_std=0.001, kind=NoiseKind.GUMBEL):
        weights = rng.normal(0.0, weight_std, size=(n_classes, n_features))
        biases = rng.normal(0.0, bias_std, size=n_classes)
        return cls(weights, biases, kind)

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.biases.copy(), self.kind)

    def utilities(self, X) -> np.ndarray:
        """Dense ``(N, K)`` utilities for a feature matrix (sparse or dense)."""
        psi = np.asarray(X @ self.weights.T) if self.n_features else np.zeros((X.shape[0], self.n_classes))
        return psi + self.biases

    def gather_utilities(self, X: sp.csr_matrix, cols: np.ndarray) -> np.ndarray:
        """Utilities ``psi[n, cols[n, m]]`` for a CSR batch, shape of ``cols``.

        Cost is proportional to ``nnz(X) * cols.shape[1]``, independent of K.
        """
        psi = self.biases[cols]
        if X.nnz:
            rows, row_select = _row_expansion(X)
            contrib = self.weights[cols[rows], X.indices[:, None]] * X.data[:, None]
            psi = psi + row_select @ contrib
        return psi

    def scatter_gradient(self, X: sp.csr_matrix, cols: np.ndarray, coef: np.ndarray):
        """Gradient of ``sum_nm coef[n, m] * psi[n, cols[n, m]]`` w.r.t. (W, b)."""
        k, d = self.weights.shape
        grad_b = np.bincount(cols.ravel(), weights=coef.ravel(), minlength=k)
        if d == 0:
            return np.zeros((k, 0)), grad_b
        if not X.nnz:
            return np.zeros((k, d)), grad_b
        rows, _ = _row_expansion(X)
        flat = cols[rows] * d + X.indices[:, None]
        vals = coef[rows] * X.data[:, None]
        grad_w = np.bincount(flat.ravel(), weights=vals.ravel(), minlength=k * d).reshape(k, d)
        return grad_w, grad_b

    def check_finite(self, where: str = ""):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise DivergenceError(f"non-finite model parameters {where}".strip())

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        k, d = self.weights.shape
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, _KIND_CODES[self.kind], k, d)
        return (
            header
            + np.ascontiguousarray(self.weights, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.biases, dtype="<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LinearModel":
        if len(blob) < _HEADER.size:
            raise ValueError("model file truncated")
        magic, version, code, k, d = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError("not a model file (bad magic)")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        if code not in _CODE_KINDS:
            raise ValueError(f"unknown noise kind code {code}")
        expected = _HEADER.size + 8 * (k * d + k)
        if len(blob) != expected:
            raise ValueError(f"model file has {len(blob)} bytes, expected {expected}")
        off = _HEADER.size
        weights = np.frombuffer(blob, dtype="<f8", count=k * d, offset=off).reshape(k, d).astype(float)
        biases = np.frombuffer(blob, dtype="<f8", count=k, offset=off + 8 * k * d).astype(float)
        return cls(weights, biases, _CODE_KINDS[code])

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LinearModel":
        return cls.from_bytes(Path(path).read_bytes())


def _row_expansion(X: sp.csr_matrix):
    """Row id of every stored entry, and the ``(B, nnz)`` matrix summing them per row."""
    nnz = X.indptr[-1]
    rows = np.repeat(np.arange(X.shape[0]), np.diff(X.indptr))
    select = sp.csr_matrix((np.ones(nnz), np.arange(nnz), X.indptr), shape=(X.shape[0], nnz))
    return rows, select
