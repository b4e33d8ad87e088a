"""Public item encoders and the id-lookup user encoder.

Parameters live in plain ``dict[str, ndarray]`` trees so trainers can add,
scale and noise them without knowing the architecture. Gradients use the same
keys as the parameters they belong to.
"""

from __future__ import annotations

import csv
from typing import Mapping

import numpy as np
from scipy import sparse

from .dataio import PublicFeatureMatrix, SparseRow

Params = dict[str, np.ndarray]

CHECKPOINT_HEADER = ["layer", "row", "col", "value"]

ALL = "all"


def _as_row(x) -> SparseRow:
    if isinstance(x, SparseRow):
        return x
    idx, vals = x
    return SparseRow(np.asarray(idx, dtype=np.int64), np.asarray(vals, dtype=np.float64))


def _as_csr(X) -> sparse.csr_matrix:
    return X.csr if isinstance(X, PublicFeatureMatrix) else sparse.csr_matrix(X)


class _Activation:
    def __init__(self, name: str):
        if name not in ("identity", "tanh"):
            raise ValueError(f"unknown activation {name!r}")
        self.name = name

    def __call__(self, h):
        return h if self.name == "identity" else np.tanh(h)

    def grad(self, h):
        return np.ones_like(h) if self.name == "identity" else 1.0 - np.tanh(h) ** 2


class PublicEncoder:
    """Shared interface. Subclasses define ``params`` and the maps below."""

    params: Params

    @property
    def p(self) -> int:
        raise NotImplementedError

    @property
    def d(self) -> int:
        raise NotImplementedError

    def with_params(self, params: Mapping[str, np.ndarray]) -> "PublicEncoder":
        raise NotImplementedError

    def forward_all(self, X) -> np.ndarray:
        raise NotImplementedError

    def vjp_all(self, X, R: np.ndarray) -> Params:
        raise NotImplementedError

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def _check_row(self, x: SparseRow) -> None:
        if len(x.indices) and (x.indices.min() < 0 or x.indices.max() >= self.p):
            raise IndexError(f"feature index out of range for p={self.p}")

    def _row_csr(self, x) -> sparse.csr_matrix:
        x = _as_row(x)
        self._check_row(x)
        return sparse.csr_matrix((x.values, x.indices, [0, len(x.indices)]), shape=(1, self.p))

    def forward(self, x) -> np.ndarray:
        return self.forward_all(self._row_csr(x))[0]

    def vjp(self, x, r) -> Params:
        """Gradient of ``<forward(x), r>`` with respect to every parameter."""
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.d,):
            raise ValueError(f"expected r of shape ({self.d},), got {r.shape}")
        return self.vjp_all(self._row_csr(x), r[None, :])

    def step(self, grad: Mapping[str, np.ndarray], lr: float) -> "PublicEncoder":
        return self.with_params({k: v - lr * grad[k] for k, v in self.params.items()})


class LinearEncoder(PublicEncoder):
    """``v(x) = theta^T x`` with ``theta`` of shape ``p x d``."""

    def __init__(self, theta):
        theta = np.array(theta, dtype=np.float64)
        if theta.ndim != 2 or not np.all(np.isfinite(theta)):
            raise ValueError("theta must be a finite 2-d array")
        self.params = {"linear": theta}

    @classmethod
    def init(cls, p: int, d: int, rng: np.random.Generator) -> "LinearEncoder":
        return cls(rng.standard_normal((p, d)) / np.sqrt(d))

    @property
    def theta(self) -> np.ndarray:
        return self.params["linear"]

    @property
    def p(self) -> int:
        return self.theta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    def with_params(self, params):
        return LinearEncoder(params["linear"])

    def forward_all(self, X) -> np.ndarray:
        return np.asarray(_as_csr(X) @ self.theta)

    def vjp_all(self, X, R) -> Params:
        return {"linear": np.asarray(_as_csr(X).T @ R)}

    def per_example_grad_norms(self, X, items, R) -> np.ndarray:
        """Norms of ``vjp(x_{items[i]}, R[i])`` without materializing them."""
        xn = np.sqrt(np.asarray(_as_csr(X).multiply(_as_csr(X)).sum(axis=1)).ravel())
        return xn[items] * np.linalg.norm(R, axis=1)

    def sparsity_pattern(self, x):
        return ALL


class TwoLayerEncoder(PublicEncoder):
    """Embedding layer followed by a square dense layer.

    ``v(x) = dense^T act(embedding^T x)`` with ``embedding`` of shape ``p x d``
    and ``dense`` of shape ``d x d``.
    """

    def __init__(self, embedding, dense, activation: str = "identity"):
        embedding = np.array(embedding, dtype=np.float64)
        dense = np.array(dense, dtype=np.float64)
        if embedding.ndim != 2 or dense.shape != (embedding.shape[1], embedding.shape[1]):
            raise ValueError("dense must be d x d where embedding is p x d")
        if not (np.all(np.isfinite(embedding)) and np.all(np.isfinite(dense))):
            raise ValueError("parameters must be finite")
        self.params = {"embedding": embedding, "dense": dense}
        self.activation = _Activation(activation)

    @classmethod
    def init(cls, p: int, d: int, rng: np.random.Generator, activation: str = "identity") -> "TwoLayerEncoder":
        scale = 1.0 / np.sqrt(d)
        return cls(rng.standard_normal((p, d)) * scale, rng.standard_normal((d, d)) * scale, activation)

    @property
    def p(self) -> int:
        return self.params["embedding"].shape[0]

    @property
    def d(self) -> int:
        return self.params["embedding"].shape[1]

    def with_params(self, params):
        return TwoLayerEncoder(params["embedding"], params["dense"], self.activation.name)

    def _hidden(self, X):
        H = np.asarray(_as_csr(X) @ self.params["embedding"])
        return H, self.activation(H)

    def forward_all(self, X) -> np.ndarray:
        _, Z = self._hidden(X)
        return Z @ self.params["dense"]

    def vjp_all(self, X, R) -> Params:
        X = _as_csr(X)
        H, Z = self._hidden(X)
        dH = (R @ self.params["dense"].T) * self.activation.grad(H)
        return {"embedding": np.asarray(X.T @ dH), "dense": Z.T @ R}

    def per_example_grad_norms(self, X, items, R) -> np.ndarray:
        X = _as_csr(X)
        H, Z = self._hidden(X)
        xn2 = np.asarray(X.multiply(X).sum(axis=1)).ravel()[items]
        dH = (R @ self.params["dense"].T) * self.activation.grad(H[items])
        sq = xn2 * np.sum(dH**2, axis=1) + np.sum(Z[items] ** 2, axis=1) * np.sum(R**2, axis=1)
        return np.sqrt(sq)

    def sparsity_pattern(self, x) -> set[int]:
        """Embedding rows that ``vjp`` can touch; the dense layer is always dense."""
        x = _as_row(x)
        return {int(i) for i, v in zip(x.indices, x.values) if v != 0}


class UserEncoder:
    """Id-lookup user encoder: one embedding row per user."""

    def __init__(self, table):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2 or not np.all(np.isfinite(table)):
            raise ValueError("user table must be a finite 2-d array")
        self.table = table

    @classmethod
    def init(cls, n: int, d: int, rng: np.random.Generator) -> "UserEncoder":
        return cls(rng.standard_normal((n, d)) / np.sqrt(d))

    @property
    def n(self) -> int:
        return self.table.shape[0]

    @property
    def d(self) -> int:
        return self.table.shape[1]

    def user_embed(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n:
            raise IndexError(f"user {k} out of range for n={self.n}")
        return self.table[k].copy()

    def set_row(self, k: int, u) -> None:
        if not 0 <= k < self.n:
            raise IndexError(f"user {k} out of range for n={self.n}")
        self.table[k] = u

    def lookup(self, users: np.ndarray) -> np.ndarray:
        return self.table[users]

    def copy(self) -> "UserEncoder":
        return UserEncoder(self.table)


def tree_norm(tree: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(v**2) for v in tree.values())))


def tree_add(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], scale: float = 1.0) -> Params:
    return {k: a[k] + scale * b[k] for k in a}


def tree_zeros_like(tree: Mapping[str, np.ndarray]) -> Params:
    return {k: np.zeros_like(v) for k, v in tree.items()}


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, enc: PublicEncoder | None = None, users: UserEncoder | None = None) -> None:
    layers = dict(enc.params) if enc is not None else {}
    if users is not None:
        layers["user"] = users.table
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CHECKPOINT_HEADER)
        for name, M in layers.items():
            for (r, c), v in np.ndenumerate(M):
                w.writerow([name, r, c, repr(float(v))])


def load_checkpoint(path, activation: str = "identity") -> tuple[PublicEncoder | None, UserEncoder | None]:
    cells: dict[str, dict[tuple[int, int], float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != CHECKPOINT_HEADER:
            raise ValueError("bad checkpoint header")
        for layer, r, c, v in reader:
            cells.setdefault(layer, {})[(int(r), int(c))] = float(v)
    mats = {}
    for layer, entries in cells.items():
        shape = (max(r for r, _ in entries) + 1, max(c for _, c in entries) + 1)
        M = np.zeros(shape)
        for key, v in entries.items():
            M[key] = v
        mats[layer] = M
    enc: PublicEncoder | None = None
    if "linear" in mats:
        enc = LinearEncoder(mats["linear"])
    elif "embedding" in mats:
        enc = TwoLayerEncoder(mats["embedding"], mats["dense"], activation)
    users = UserEncoder(mats["user"]) if "user" in mats else None
    return enc, users
