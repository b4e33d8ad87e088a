"""Per-item sufficient statistics and their Gaussian perturbation.

For the quadratic loss the statistics of item ``j`` are

    A_j = sum_{i in items==j} w_i u_i u_i^T,   b_j = sum w_i y_i u_i

computed from clipped user vectors and labels. Accumulation runs in example
order (``np.add.at`` is unbuffered and sequential), so results do not depend
on how the data is sharded upstream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Hashable, NamedTuple

import numpy as np

from .dataio import InteractionDataset, PublicFeatureMatrix
from .encoder import PublicEncoder, UserEncoder
from .rng import NoiseSource


def clip(x, bound: float):
    """Project onto the L2 (Frobenius for matrices) ball of radius ``bound``."""
    if not bound > 0:
        raise ValueError("clip bound must be positive")
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot clip non-finite input")
    norm = float(np.sqrt(np.sum(arr**2)))
    if norm <= bound:
        return arr.copy() if arr.ndim else float(arr)
    out = arr * (bound / norm)
    return out if arr.ndim else float(out)


def clip_rows(M: np.ndarray, bound: float | None) -> np.ndarray:
    """Clip each row (or each scalar of a vector) independently."""
    M = np.asarray(M, dtype=np.float64)
    if bound is None:
        return M.copy()
    if not np.all(np.isfinite(M)):
        raise ValueError("cannot clip non-finite input")
    if M.ndim == 1:
        return np.clip(M, -bound, bound)
    norms = np.linalg.norm(M.reshape(len(M), int(np.prod(M.shape[1:]))), axis=1)
    scale = np.ones_like(norms)
    over = norms > bound
    scale[over] = bound / norms[over]
    return M * scale.reshape((-1,) + (1,) * (M.ndim - 1))


class ItemStats(NamedTuple):
    j: int
    A: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class SuffStats:
    """Stacked statistics: ``A`` is ``m x d x d`` and ``b`` is ``m x d``."""

    A: np.ndarray
    b: np.ndarray

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def __getitem__(self, j: int) -> ItemStats:
        return ItemStats(j, self.A[j], self.b[j])

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(self.A + other.A, self.b + other.b)

    def residuals(self, V: np.ndarray, items=None, ridge: float = 0.0) -> np.ndarray:
        """``A_j v_j - b_j`` (+ ``ridge * v_j``) for every item or a subset."""
        A, b = (self.A, self.b) if items is None else (self.A[items], self.b[items])
        R = np.einsum("jab,jb->ja", A, V) - b
        if ridge:
            R = R + ridge * V
        return R

    @property
    def num_scalars(self) -> int:
        return self.A.size + self.b.size


def _user_table(users) -> np.ndarray:
    return users.table if isinstance(users, UserEncoder) else np.asarray(users, dtype=np.float64)


def _user_vectors(ds: InteractionDataset, users) -> np.ndarray:
    return _user_table(users)[ds.users]


def compute_stats(
    ds: InteractionDataset, users, clip_u: float, clip_y: float, m: int | None = None
) -> SuffStats:
    """Un-noised ``(A_j, b_j)`` for every item; absent items get zeros."""
    if not (clip_u > 0 and clip_y > 0):
        raise ValueError("clip bounds must be positive")
    m = ds.m if m is None else m
    U = clip_rows(_user_vectors(ds, users), clip_u)
    y = clip_rows(ds.labels, clip_y)
    d = _user_table(users).shape[1]
    A = np.zeros((m, d, d))
    b = np.zeros((m, d))
    w = ds.weights
    np.add.at(A, ds.items, w[:, None, None] * (U[:, :, None] * U[:, None, :]))
    np.add.at(b, ds.items, (w * y)[:, None] * U)
    return SuffStats(A, b)


def symmetric_gaussian(d: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric matrix whose upper triangle (with diagonal) is i.i.d. N(0, 1)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return _symmetrize(rng.standard_normal(d * (d + 1) // 2), d)


def _symmetrize(upper: np.ndarray, d: int) -> np.ndarray:
    M = np.zeros((d, d))
    M[np.triu_indices(d)] = upper
    return M + np.triu(M, 1).T


def _noised(
    mats: np.ndarray, vecs: np.ndarray, mat_scale: float, vec_scale: float,
    noise: NoiseSource, tag: tuple, fields: tuple[str, str],
) -> tuple[np.ndarray, np.ndarray]:
    m, d = vecs.shape
    tri = d * (d + 1) // 2
    iu, ju = np.triu_indices(d)
    upper = np.empty((m, tri))
    flat = np.empty((m, d))
    for j in range(m):
        upper[j] = noise.normal(tag + (j, fields[0]), tri)
        flat[j] = noise.normal(tag + (j, fields[1]), d)
    sym = np.zeros((m, d, d))
    sym[:, iu, ju] = upper
    sym[:, ju, iu] = upper
    return mats + mat_scale * sym, vecs + vec_scale * flat


def noise_stats(
    stats: SuffStats, sigma: float, clip_u: float, clip_y: float,
    noise: NoiseSource, tag: tuple[Hashable, ...] = ("stats", 0),
) -> SuffStats:
    """Add ``sigma * clip_u^2 * SymN`` to each ``A_j`` and ``sigma * clip_u * clip_y * N`` to each ``b_j``.

    Draws for item ``j`` come from substreams ``tag + (j, "A")`` and
    ``tag + (j, "b")``. With ``sigma == 0`` nothing is drawn.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return SuffStats(stats.A.copy(), stats.b.copy())
    A, b = _noised(stats.A, stats.b, sigma * clip_u**2, sigma * clip_u * clip_y, noise, tuple(tag), ("A", "b"))
    return SuffStats(A, b)


# ---------------------------------------------------------------------------
# Convex losses


class QuadraticLoss:
    """``l(s, y) = (s - y)^2 / 2``."""

    name = "quadratic"

    def value(self, s, y):
        return 0.5 * (np.asarray(s) - y) ** 2

    def d1(self, s, y):
        return np.asarray(s) - y

    def d2(self, s, y):
        return np.ones_like(np.asarray(s, dtype=np.float64))


class LogisticLoss:
    """``l(s, y) = log(1 + exp(-(2y - 1) s))`` for labels in {0, 1}."""

    name = "logistic"

    def value(self, s, y):
        z = (2 * np.asarray(y) - 1) * np.asarray(s)
        return np.logaddexp(0.0, -z)

    def d1(self, s, y):
        sign = 2 * np.asarray(y) - 1
        return -sign * _sigmoid(-sign * np.asarray(s))

    def d2(self, s, y):
        z = (2 * np.asarray(y) - 1) * np.asarray(s)
        return _sigmoid(z) * _sigmoid(-z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


LOSSES = {"quadratic": QuadraticLoss, "logistic": LogisticLoss}


def get_loss(name_or_loss):
    if isinstance(name_or_loss, str):
        return LOSSES[name_or_loss]()
    for attr in ("value", "d1", "d2"):
        if not callable(getattr(name_or_loss, attr, None)):
            raise TypeError(f"loss must provide {attr}()")
    return name_or_loss


@dataclass(frozen=True)
class ConvexItemStats:
    j: int
    H: np.ndarray
    g: np.ndarray
    c: float
    anchor: np.ndarray


@dataclass(frozen=True)
class ConvexStats:
    """Quadratic model statistics around ``anchor`` (the ``m x d`` item outputs).

    ``c`` holds the un-noised loss offsets; it is kept for diagnostics only
    and is never written out or sent anywhere.
    """

    H: np.ndarray
    g: np.ndarray
    c: np.ndarray
    anchor: np.ndarray

    def __getitem__(self, j: int) -> ConvexItemStats:
        return ConvexItemStats(j, self.H[j], self.g[j], float(self.c[j]), self.anchor[j])

    def residuals(self, V: np.ndarray) -> np.ndarray:
        return np.einsum("jab,jb->ja", self.H, V - self.anchor) + self.g


def compute_convex_stats(
    ds: InteractionDataset, users, enc: PublicEncoder, X: PublicFeatureMatrix, loss,
    clip_h: float, clip_g: float, clip_u: float, clip_y: float,
) -> ConvexStats:
    """Statistics of the second-order expansion of the loss in item-output space.

    Each summand ``w_i * clip(d2 * u u^T, clip_h)`` and ``w_i * clip(d1 * u, clip_g)``
    is clipped individually before summation.
    """
    loss = get_loss(loss)
    if clip_h is None or clip_g is None:
        raise ValueError("clip_h and clip_g are required")
    m = X.m
    V0 = enc.forward_all(X)
    U = clip_rows(_user_vectors(ds, users), clip_u)
    y = clip_rows(ds.labels, clip_y)
    s = np.einsum("id,id->i", U, V0[ds.items])
    d = V0.shape[1]
    h_terms = clip_rows(loss.d2(s, y)[:, None, None] * (U[:, :, None] * U[:, None, :]), clip_h)
    g_terms = clip_rows(loss.d1(s, y)[:, None] * U, clip_g)
    w = ds.weights
    H = np.zeros((m, d, d))
    g = np.zeros((m, d))
    c = np.zeros(m)
    np.add.at(H, ds.items, w[:, None, None] * h_terms)
    np.add.at(g, ds.items, w[:, None] * g_terms)
    np.add.at(c, ds.items, w * loss.value(s, y))
    return ConvexStats(H, g, c, V0)


def noise_convex_stats(
    stats: ConvexStats, sigma: float, clip_h: float, clip_g: float,
    noise: NoiseSource, tag: tuple[Hashable, ...] = ("convex", 0),
) -> ConvexStats:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return ConvexStats(stats.H.copy(), stats.g.copy(), stats.c, stats.anchor)
    H, g = _noised(stats.H, stats.g, sigma * clip_h, sigma * clip_g, noise, tuple(tag), ("H", "g"))
    return ConvexStats(H, g, stats.c, stats.anchor)


# ---------------------------------------------------------------------------
# Dump format


STATS_HEADER = ["item_id", "kind", "row", "col", "value"]


def save_stats(path, stats) -> None:
    """Write ``A``/``b`` or ``H``/``g`` in long format. Loss offsets are omitted."""
    if isinstance(stats, ConvexStats):
        mats, vecs, kinds = stats.H, stats.g, ("H", "g")
    else:
        mats, vecs, kinds = stats.A, stats.b, ("A", "b")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_HEADER)
        for j in range(len(vecs)):
            for (r, c), v in np.ndenumerate(mats[j]):
                w.writerow([j, kinds[0], r, c, repr(float(v))])
            for r, v in enumerate(vecs[j]):
                w.writerow([j, kinds[1], r, 0, repr(float(v))])


def load_stats(path) -> SuffStats:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != STATS_HEADER:
            raise ValueError("bad stats header")
        rows = [(int(j), kind, int(r), int(c), float(v)) for j, kind, r, c, v in reader]
    m = max(r[0] for r in rows) + 1
    d = max(r[2] for r in rows) + 1
    A = np.zeros((m, d, d))
    b = np.zeros((m, d))
    for j, kind, r, c, v in rows:
        if kind in ("A", "H"):
            A[j, r, c] = v
        else:
            b[j, r] = v
    return SuffStats(A, b)
