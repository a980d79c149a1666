"""Datasets: sparse text formats, preprocessing and synthetic generators.

Two text formats are supported:

* LIBSVM: ``label idx:val idx:val ...`` per line. Labels are non-negative
  integers (a comma-separated list is accepted for multi-label data).
  Feature indices may be 0- or 1-based; ``zero_based="auto"`` treats a file
  as 0-based iff some index is 0.
* XMLC repository format: a header ``N D K`` followed by
  ``l1,l2,... idx:val ...`` lines with 0-based indices. A line without
  labels starts directly with a feature (or is blank).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp


class DataFormatError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class SparseExample(NamedTuple):
    indices: np.ndarray
    values: np.ndarray
    label: int


@dataclass
class Dataset:
    X: sp.csr_matrix  # (N, D)
    labels: np.ndarray  # (N,) first label, -1 when an example has none
    n_classes: int
    label_lists: list | None = None  # full label lists for multi-label data
    true_probs: np.ndarray | None = None
    class_map: np.ndarray | None = None  # compact class id -> original id

    def __post_init__(self):
        self.X = sp.csr_matrix(self.X, dtype=float)
        self.X.sort_indices()
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.X.shape[0] != self.labels.size:
            raise ValueError("feature rows and labels disagree in length")
        if self.labels.size and self.labels.max(initial=-1) >= self.n_classes:
            raise ValueError("label id exceeds number of classes")

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def is_multilabel(self) -> bool:
        return self.label_lists is not None

    def example(self, i: int) -> SparseExample:
        lo, hi = self.X.indptr[i], self.X.indptr[i + 1]
        return SparseExample(self.X.indices[lo:hi].copy(), self.X.data[lo:hi].copy(), int(self.labels[i]))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        lists = None if self.label_lists is None else [self.label_lists[i] for i in rows]
        return replace(self, X=self.X[rows], labels=self.labels[rows], label_lists=lists)

    def split(self, n_test: int) -> tuple["Dataset", "Dataset"]:
        """Last ``n_test`` rows become the test set."""
        n = self.n_obs - n_test
        return self.subset(np.arange(n)), self.subset(np.arange(n, self.n_obs))


# -- parsing ------------------------------------------------------------------

def _parse_labels(tok, path, lineno):
    try:
        labels = [int(t) for t in tok.split(",") if t]
    except ValueError:
        raise DataFormatError(f"bad label {tok!r}", path, lineno) from None
    if any(lab < 0 for lab in labels):
        raise DataFormatError(f"negative label in {tok!r}", path, lineno)
    return labels


def _parse_features(tokens, path, lineno):
    idx, val = [], []
    for tok in tokens:
        i, sep, v = tok.partition(":")
        if not sep:
            raise DataFormatError(f"expected idx:val, got {tok!r}", path, lineno)
        try:
            idx.append(int(i))
            val.append(float(v))
        except ValueError:
            raise DataFormatError(f"bad feature {tok!r}", path, lineno) from None
    return idx, val


def _parse_line(line, path, lineno, labels_optional):
    tokens = line.split()
    if not tokens:
        if labels_optional:
            return [], [], []
        raise DataFormatError("empty line", path, lineno)
    if ":" in tokens[0]:
        if not labels_optional:
            raise DataFormatError("missing label", path, lineno)
        labels = []
    else:
        labels, tokens = _parse_labels(tokens[0], path, lineno), tokens[1:]
    idx, val = _parse_features(tokens, path, lineno)
    return labels, idx, val


def _build(label_lists, rows_idx, rows_val, n_features, n_classes, zero_based, path):
    flat_idx = [i for r in rows_idx for i in r]
    if zero_based == "auto":
        zero_based = not flat_idx or min(flat_idx) == 0
    shift = 0 if zero_based else 1
    indptr = np.zeros(len(rows_idx) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows_idx])
    indices = np.asarray(flat_idx, dtype=np.int64) - shift
    data = np.asarray([v for r in rows_val for v in r], dtype=float)
    if indices.size and indices.min() < 0:
        raise DataFormatError("feature index 0 in a 1-based file", path)
    if n_features is None:
        n_features = int(indices.max()) + 1 if indices.size else 0
    elif indices.size and indices.max() >= n_features:
        raise DataFormatError(f"feature index {int(indices.max())} >= D={n_features}", path)
    for r, row in enumerate(rows_idx):
        if any(b <= a for a, b in zip(row, row[1:])):
            raise DataFormatError("feature indices must be strictly increasing", path, r + 1)
    X = sp.csr_matrix((data, indices, indptr), shape=(len(rows_idx), n_features))
    all_labels = [lab for lst in label_lists for lab in lst]
    if n_classes is None:
        n_classes = max(all_labels) + 1 if all_labels else 0
    elif all_labels and max(all_labels) >= n_classes:
        raise DataFormatError(f"label {max(all_labels)} >= K={n_classes}", path)
    first = np.array([lst[0] if lst else -1 for lst in label_lists], dtype=np.int64)
    multilabel = any(len(lst) != 1 for lst in label_lists)
    lists = [list(lst) for lst in label_lists] if multilabel else None
    return Dataset(X, first, n_classes, label_lists=lists)


def load_libsvm(path, n_features=None, n_classes=None, zero_based="auto", pixel_scale=False) -> Dataset:
    """Read a LIBSVM file. ``pixel_scale`` divides values by 255."""
    path = Path(path)
    label_lists, rows_idx, rows_val = [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0]
            if not line.strip():
                continue
            labels, idx, val = _parse_line(line, path, lineno, labels_optional=False)
            label_lists.append(labels)
            rows_idx.append(idx)
            rows_val.append(val)
    ds = _build(label_lists, rows_idx, rows_val, n_features, n_classes, zero_based, path)
    if pixel_scale:
        ds.X.data /= 255.0
    return ds


def load_xmlc(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise DataFormatError("header must be 'N D K'", path, 1)
        try:
            n, d, k = (int(h) for h in header)
        except ValueError:
            raise DataFormatError("header must hold three integers", path, 1) from None
        label_lists, rows_idx, rows_val = [], [], []
        for lineno, line in enumerate(fh, 2):
            labels, idx, val = _parse_line(line, path, lineno, labels_optional=True)
            label_lists.append(labels)
            rows_idx.append(idx)
            rows_val.append(val)
    if len(label_lists) != n:
        raise DataFormatError(f"header says N={n} but file has {len(label_lists)} examples", path)
    ds = _build(label_lists, rows_idx, rows_val, d, k, True, path)
    if ds.label_lists is None:
        ds.label_lists = [[int(y)] for y in ds.labels]
    return ds


def _format_row(X, i, shift):
    lo, hi = X.indptr[i], X.indptr[i + 1]
    return " ".join(f"{j + shift}:{float(v)!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))


def _label_lists(ds):
    if ds.label_lists is not None:
        return ds.label_lists
    return [[int(y)] if y >= 0 else [] for y in ds.labels]


def save_libsvm(ds: Dataset, path, zero_based=False):
    shift = 0 if zero_based else 1
    with Path(path).open("w") as fh:
        for i, labels in enumerate(_label_lists(ds)):
            if not labels:
                raise ValueError(f"example {i} has no label; LIBSVM needs one")
            feats = _format_row(ds.X, i, shift)
            fh.write(",".join(map(str, labels)) + (" " + feats if feats else "") + "\n")


def save_xmlc(ds: Dataset, path):
    with Path(path).open("w") as fh:
        fh.write(f"{ds.n_obs} {ds.n_features} {ds.n_classes}\n")
        for i, labels in enumerate(_label_lists(ds)):
            fh.write(",".join(map(str, labels)) + " " + _format_row(ds.X, i, 0) + "\n")


def sniff_format(path) -> str:
    """``xmlc`` if the first line is an ``N D K`` header, else ``libsvm``."""
    with Path(path).open() as fh:
        first = fh.readline().split()
    if len(first) == 3 and all(t.isdigit() for t in first):
        return "xmlc"
    return "libsvm"


def load(path, fmt="auto", **kwargs) -> Dataset:
    fmt = sniff_format(path) if fmt == "auto" else fmt
    if fmt == "xmlc":
        return load_xmlc(path)
    if fmt == "libsvm":
        return load_libsvm(path, **kwargs)
    raise ValueError(f"unknown format {fmt!r}")


# -- preprocessing ------------------------------------------------------------

def first_label_projection(ds: Dataset) -> Dataset:
    """Keep the first label of every example, then compact class ids.

    Class ids are renumbered to ``0..K'-1`` over the labels that occur;
    ``class_map[new] = original`` is kept (composed with any earlier map).
    """
    lists = _label_lists(ds)
    empty = [i for i, lst in enumerate(lists) if not lst]
    if empty:
        head = ", ".join(map(str, empty[:20]))
        raise ValueError(f"{len(empty)} example(s) without labels: {head}{' ...' if len(empty) > 20 else ''}")
    first = np.array([lst[0] for lst in lists], dtype=np.int64)
    occurring = np.unique(first)
    old_map = ds.class_map if ds.class_map is not None else np.arange(ds.n_classes)
    true_probs = None
    if ds.true_probs is not None:
        p = ds.true_probs[occurring]
        true_probs = p / p.sum()
    return Dataset(
        ds.X,
        np.searchsorted(occurring, first),
        occurring.size,
        true_probs=true_probs,
        class_map=old_map[occurring],
    )


def remap_labels(ds: Dataset, class_map) -> tuple[Dataset, int]:
    """Express first labels in the compact ids of ``class_map`` (new -> original).

    Used to align a test set with the classes a model was trained on.
    Examples whose first label is missing or absent from the map are
    dropped; returns ``(dataset, n_dropped)``.
    """
    class_map = np.asarray(class_map, dtype=np.int64)
    lists = _label_lists(ds)
    first = np.array([lst[0] if lst else -1 for lst in lists], dtype=np.int64)
    if ds.class_map is not None:
        first = np.where(first >= 0, ds.class_map[np.maximum(first, 0)], -1)
    order = np.argsort(class_map)
    pos = np.searchsorted(class_map, first, sorter=order)
    pos = np.minimum(pos, class_map.size - 1)
    found = (first >= 0) & (class_map[order[pos]] == first)
    keep = np.flatnonzero(found)
    out = Dataset(ds.X[keep], order[pos[keep]], class_map.size, class_map=class_map.copy())
    return out, int(first.size - keep.size)


def normalize_max(ds: Dataset, per_feature=False) -> Dataset:
    """Divide features by the largest absolute value (globally, or per column)."""
    X = ds.X.copy()
    if X.nnz == 0 or not np.any(X.data):
        warnings.warn("all features are zero; normalization skipped", stacklevel=2)
        return replace(ds, X=X)
    if per_feature:
        col_max = np.asarray(abs(X).max(axis=0).todense()).ravel()
        col_max[col_max == 0] = 1.0
        X.data /= col_max[X.indices]
    else:
        X.data /= np.abs(X.data).max()
    return replace(ds, X=X)


def save_class_map(ds: Dataset, path):
    if ds.class_map is None:
        raise ValueError("dataset has no class map")
    Path(path).write_text(json.dumps({"class_map": [int(c) for c in ds.class_map]}))


def load_class_map(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text())["class_map"], dtype=np.int64)


# -- synthetic data -------------------------------------------------------------

def synth_categorical(n_classes_raw: int, n_obs: int, seed: int = 0, p_tilde=None) -> Dataset:
    """Labels only: ``p_k ~ p_tilde_k^2`` with ``p_tilde_k ~ U[0, 1]``.

    K is reduced to the classes that actually occur; ``true_probs`` is the
    generating distribution renormalized over them.
    """
    if n_classes_raw < 2 or n_obs < 1:
        raise ValueError("need at least 2 classes and 1 observation")
    rng = np.random.default_rng(seed)
    if p_tilde is None:
        p_tilde = rng.random(n_classes_raw)
    p = np.square(np.asarray(p_tilde, dtype=float))
    p /= p.sum()
    labels = rng.choice(n_classes_raw, size=n_obs, p=p)
    raw = Dataset(sp.csr_matrix((n_obs, 0)), labels, n_classes_raw, true_probs=p)
    return first_label_projection(raw)


def synth_linear(n_classes: int, n_features: int, n_obs: int, seed: int = 0, density: float = 0.05, signal: float = 3.0) -> Dataset:
    """Sparse nonnegative features with labels from a random softmax-linear model.

    Weights are ``N(0, signal^2 / (density * D))`` so utilities have spread
    of order ``signal``. Classes that never occur are dropped.
    """
    rng = np.random.default_rng(seed)
    X = sp.random(n_obs, n_features, density=density, format="csr", random_state=rng, data_rvs=rng.random)
    X.data = 1.0 - X.data  # (0, 1]
    w = rng.normal(0.0, signal / np.sqrt(density * n_features), size=(n_classes, n_features))
    b = rng.normal(0.0, 1.0, size=n_classes)
    psi = np.asarray(X @ w.T) + b
    gumbel = -np.log(-np.log(np.minimum(1.0 - rng.random(psi.shape), 1.0 - 2.0**-53)))
    labels = np.argmax(psi + gumbel, axis=1)
    return first_label_projection(Dataset(X, labels, n_classes))
