"""Interaction data, CSV formats and a synthetic linear generator.

Item and user ids are dense 0-based integers. External ids can be mapped with
:func:`remap_ids` before writing the CSV files read here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import sparse

INTERACTIONS_HEADER = ["user_id", "item_id", "rating"]
FEATURES_HEADER = ["item_id", "feature_id", "value"]
THETA_HEADER = ["row", "col", "value"]


class DataFormatError(ValueError):
    """Raised for malformed input files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SparseRow(NamedTuple):
    indices: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class PublicFeatureMatrix:
    """Sparse ``m x p`` item feature matrix, stored as CSR."""

    csr: sparse.csr_matrix

    def __post_init__(self):
        csr = sparse.csr_matrix(self.csr, dtype=np.float64)
        m, p = csr.shape
        if m < 1 or p < 1:
            raise ValueError("feature matrix needs m >= 1 and p >= 1")
        for j in range(m):
            idx = csr.indices[csr.indptr[j] : csr.indptr[j + 1]]
            if len(np.unique(idx)) != len(idx):
                raise ValueError(f"duplicate feature index in row {j}")
        csr.sort_indices()
        object.__setattr__(self, "csr", csr)

    @classmethod
    def from_rows(cls, rows: Sequence[Iterable[tuple[int, float]]], p: int) -> "PublicFeatureMatrix":
        indptr, indices, values = [0], [], []
        for j, row in enumerate(rows):
            seen = set()
            for f, v in row:
                if not 0 <= f < p:
                    raise ValueError(f"feature index {f} out of range for p={p}")
                if f in seen:
                    raise ValueError(f"duplicate feature index {f} in row {j}")
                seen.add(f)
                indices.append(f)
                values.append(float(v))
            indptr.append(len(indices))
        csr = sparse.csr_matrix(
            (np.array(values, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
            shape=(len(rows), p),
        )
        return cls(csr)

    @classmethod
    def from_dense(cls, X) -> "PublicFeatureMatrix":
        return cls(sparse.csr_matrix(np.asarray(X, dtype=np.float64)))

    @property
    def m(self) -> int:
        return self.csr.shape[0]

    @property
    def p(self) -> int:
        return self.csr.shape[1]

    def row(self, j: int) -> SparseRow:
        lo, hi = self.csr.indptr[j], self.csr.indptr[j + 1]
        return SparseRow(self.csr.indices[lo:hi].copy(), self.csr.data[lo:hi].copy())

    @property
    def rows(self) -> list[SparseRow]:
        return [self.row(j) for j in range(self.m)]

    def subset(self, items: np.ndarray) -> sparse.csr_matrix:
        return self.csr[np.asarray(items, dtype=np.int64)]

    def row_norms(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.csr.multiply(self.csr).sum(axis=1)).ravel())

    @property
    def norm_bound(self) -> float:
        """Largest row norm (a data-independent bound on item feature norms)."""
        return float(self.row_norms().max())

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


@dataclass(frozen=True)
class InteractionDataset:
    """A multiset of ``(user, item, label, weight)`` examples."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    weights: np.ndarray = None
    n: int = None
    m: int = None

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).ravel()
        items = np.asarray(self.items, dtype=np.int64).ravel()
        labels = np.asarray(self.labels, dtype=np.float64).ravel()
        weights = np.ones(len(labels)) if self.weights is None else np.asarray(self.weights, dtype=np.float64).ravel()
        if not len(users) == len(items) == len(labels) == len(weights):
            raise ValueError("users, items, labels and weights must have equal length")
        if len(users) and (users.min() < 0 or items.min() < 0):
            raise ValueError("negative index")
        if not np.all(np.isfinite(labels)):
            raise ValueError("non-finite label")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        n = int(users.max()) + 1 if self.n is None and len(users) else (self.n or 0)
        m = int(items.max()) + 1 if self.m is None and len(items) else (self.m or 0)
        if len(users) and (users.max() >= n or items.max() >= m):
            raise ValueError("index exceeds declared user/item count")
        for name, arr in [("users", users), ("items", items), ("labels", labels), ("weights", weights)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "m", int(m))

    @property
    def D(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.D

    def subset(self, idx) -> "InteractionDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return InteractionDataset(
            self.users[idx], self.items[idx], self.labels[idx], self.weights[idx], n=self.n, m=self.m
        )

    def with_weights(self, weights) -> "InteractionDataset":
        return InteractionDataset(self.users, self.items, self.labels, weights, n=self.n, m=self.m)

    def concat(self, other: "InteractionDataset") -> "InteractionDataset":
        return InteractionDataset(
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.weights, other.weights]),
            n=max(self.n, other.n),
            m=max(self.m, other.m),
        )


@dataclass(frozen=True)
class Partition:
    """Example indices grouped by item and by user, each in input order."""

    by_item: dict[int, np.ndarray] = field(default_factory=dict)
    by_user: dict[int, np.ndarray] = field(default_factory=dict)


def _group(keys: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    uniq, starts = np.unique(keys[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    return {int(k): order[s:e] for k, s, e in zip(uniq, starts, bounds)}


def partition(ds: InteractionDataset) -> Partition:
    return Partition(by_item=_group(ds.items), by_user=_group(ds.users))


def remap_ids(values: Sequence) -> tuple[np.ndarray, dict]:
    """Map arbitrary hashable ids to dense 0-based ids in first-seen order."""
    mapping: dict = {}
    dense = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        dense[i] = mapping.setdefault(v, len(mapping))
    return dense, mapping


# ---------------------------------------------------------------------------
# CSV I/O


def _read_rows(path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataFormatError("missing header", 1) from None
        if [h.strip() for h in first] != header:
            raise DataFormatError(f"expected header {','.join(header)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
            yield lineno, row


def _parse_index(text: str, lineno: int) -> int:
    try:
        value = int(text.strip())
    except ValueError:
        raise DataFormatError(f"not an integer: {text!r}", lineno) from None
    if value < 0:
        raise DataFormatError(f"negative index {value}", lineno)
    return value


def _parse_real(text: str, lineno: int) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise DataFormatError(f"not a number: {text!r}", lineno) from None
    if not math.isfinite(value):
        raise DataFormatError(f"non-finite value {text.strip()!r}", lineno)
    return value


def load_feature_matrix(path) -> PublicFeatureMatrix:
    entries: dict[tuple[int, int], float] = {}
    for lineno, (a, b, c) in _read_rows(path, FEATURES_HEADER):
        key = (_parse_index(a, lineno), _parse_index(b, lineno))
        if key in entries:
            raise DataFormatError(f"duplicate entry for item {key[0]}, feature {key[1]}", lineno)
        entries[key] = _parse_real(c, lineno)
    if not entries:
        raise DataFormatError("no items")
    items = np.array([k[0] for k in entries])
    feats = np.array([k[1] for k in entries])
    vals = np.array(list(entries.values()))
    csr = sparse.csr_matrix((vals, (items, feats)), shape=(items.max() + 1, feats.max() + 1))
    return PublicFeatureMatrix(csr)


def load_interactions(path) -> InteractionDataset:
    users, items, labels = [], [], []
    for lineno, (a, b, c) in _read_rows(path, INTERACTIONS_HEADER):
        users.append(_parse_index(a, lineno))
        items.append(_parse_index(b, lineno))
        labels.append(_parse_real(c, lineno))
    return InteractionDataset(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64), np.array(labels))


def _fmt(x: float) -> str:
    return repr(float(x))


def save_feature_matrix(path, X: PublicFeatureMatrix) -> None:
    coo = X.csr.tocoo()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURES_HEADER)
        for i, f, v in zip(coo.row, coo.col, coo.data):
            w.writerow([int(i), int(f), _fmt(v)])


def save_interactions(path, ds: InteractionDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(INTERACTIONS_HEADER)
        for k, j, y in zip(ds.users, ds.items, ds.labels):
            w.writerow([int(k), int(j), _fmt(y)])


def save_matrix(path, M: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(THETA_HEADER)
        for (r, c), v in np.ndenumerate(np.asarray(M)):
            w.writerow([r, c, _fmt(v)])


def load_matrix(path) -> np.ndarray:
    cells = {}
    for lineno, (a, b, c) in _read_rows(path, THETA_HEADER):
        cells[(_parse_index(a, lineno), _parse_index(b, lineno))] = _parse_real(c, lineno)
    if not cells:
        raise DataFormatError("empty matrix")
    shape = (max(r for r, _ in cells) + 1, max(c for _, c in cells) + 1)
    M = np.zeros(shape)
    for key, v in cells.items():
        M[key] = v
    return M


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticLinear:
    features: PublicFeatureMatrix
    interactions: InteractionDataset
    theta: np.ndarray
    users: np.ndarray


def gen_synthetic_linear(
    m: int,
    n: int,
    p: int,
    d: int,
    features_per_item: int,
    label_noise_std: float,
    seed: int,
    num_examples: int = 1000,
    user_norm: float = 1.0,
) -> SyntheticLinear:
    """Bilinear ground truth ``y = x_j^T theta u_k + noise``.

    Each item gets ``features_per_item`` distinct active features with
    Gaussian values, normalized so every row has unit norm. ``theta`` and the
    user vectors are standard normal; user vectors are then shrunk to norm at
    most ``user_norm``. Examples pick ``(user, item)`` uniformly at random.
    Labels are not clipped here.
    """
    if min(m, n, p, d, features_per_item, num_examples) < 1:
        raise ValueError("all dimensions must be positive")
    if d > p:
        raise ValueError(f"d={d} exceeds p={p}")
    if features_per_item > p:
        raise ValueError(f"features_per_item={features_per_item} exceeds p={p}")
    if label_noise_std < 0:
        raise ValueError("label_noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(m):
        idx = np.sort(rng.choice(p, size=features_per_item, replace=False))
        vals = rng.standard_normal(features_per_item)
        vals /= np.linalg.norm(vals)
        rows.append(list(zip(idx.tolist(), vals.tolist())))
    X = PublicFeatureMatrix.from_rows(rows, p)
    theta = rng.standard_normal((p, d))
    U = rng.standard_normal((n, d))
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U *= np.minimum(1.0, user_norm / np.maximum(norms, np.finfo(float).tiny))
    users = rng.integers(n, size=num_examples)
    items = rng.integers(m, size=num_examples)
    V = X.csr @ theta
    clean = np.einsum("id,id->i", V[items], U[users])
    labels = clean + label_noise_std * rng.standard_normal(num_examples) if label_noise_std > 0 else clean
    ds = InteractionDataset(users, items, labels, n=n, m=m)
    return SyntheticLinear(X, ds, theta, U)


def save_synthetic(directory, data: SyntheticLinear) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": directory / "interactions.csv",
        "features": directory / "features.csv",
        "theta": directory / "theta.csv",
        "users": directory / "users.csv",
    }
    save_interactions(paths["interactions"], data.interactions)
    save_feature_matrix(paths["features"], data.features)
    save_matrix(paths["theta"], data.theta)
    save_matrix(paths["users"], data.users)
    return paths
