"""Prediction error, ranking recall and excess empirical risk."""

from __future__ import annotations

import csv
import math
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .dataio import InteractionDataset, PublicFeatureMatrix
from .encoder import LinearEncoder, UserEncoder
from .trainers import project_theta, quadratic_loss


def rmse(pairs: Iterable[tuple[float, float]] | np.ndarray) -> float:
    """Root mean squared error over ``(prediction, label)`` pairs."""
    arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("rmse of an empty set")
    arr = arr.reshape(-1, 2)
    return float(np.sqrt(np.mean((arr[:, 0] - arr[:, 1]) ** 2)))


def top_k(scores: np.ndarray, k: int, exclude: Iterable[int] = ()) -> np.ndarray:
    """Indices of the ``k`` best scores, ties broken by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    masked = scores.copy()
    ex = np.fromiter(exclude, dtype=np.int64)
    masked[ex] = -np.inf
    allowed = np.ones(len(scores), dtype=bool)
    allowed[ex] = False
    order = np.lexsort((np.arange(len(scores)), -masked))
    return order[allowed[order]][:k]


class RecallReport(NamedTuple):
    mean: float
    per_user: dict[int, float]


def recall_at_k(
    scores: Mapping[int, np.ndarray] | np.ndarray,
    history: Mapping[int, Iterable[int]],
    target: Mapping[int, Iterable[int]],
    k: int = 20,
) -> RecallReport:
    """Mean over users of ``|target & topK| / min(K, |target|)``.

    History items are removed before ranking. Users with an empty target are
    left out of both the mean and ``per_user``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    per_user = {}
    for user, tgt in target.items():
        tgt = set(int(t) for t in tgt)
        if not tgt:
            continue
        hist = set(int(h) for h in history.get(user, ()))
        if hist & tgt:
            raise ValueError(f"user {user}: history and target overlap")
        ranked = top_k(scores[user], k, sorted(hist))
        per_user[user] = len(tgt.intersection(ranked.tolist())) / min(k, len(tgt))
    mean = float(np.mean(list(per_user.values()))) if per_user else math.nan
    return RecallReport(mean, per_user)


def holdout_split(ds: InteractionDataset, target_fraction: float, rng: np.random.Generator):
    """Split each user's distinct items into history and target sets."""
    history, target = {}, {}
    for k in range(ds.n):
        items = np.unique(ds.items[ds.users == k])
        if len(items) == 0:
            continue
        rng.shuffle(items)
        cut = int(round(len(items) * (1 - target_fraction)))
        history[k] = sorted(items[:cut].tolist())
        target[k] = sorted(items[cut:].tolist())
    return history, target


# ---------------------------------------------------------------------------
# Excess empirical risk


def lipschitz_constant(ds: InteractionDataset, users, X: PublicFeatureMatrix, iters: int = 200) -> float:
    """Largest eigenvalue of the Hessian of the squared loss in ``theta`` (power iteration)."""
    table = users.table if isinstance(users, UserEncoder) else np.asarray(users)
    U = table[ds.users]
    csr = X.csr
    w = ds.weights
    rng = np.random.default_rng(0)
    M = rng.standard_normal((X.p, U.shape[1]))
    lam = 0.0
    for _ in range(iters):
        M /= np.linalg.norm(M)
        s = np.einsum("id,id->i", U, np.asarray(csr @ M)[ds.items])
        R = np.zeros((X.m, U.shape[1]))
        np.add.at(R, ds.items, (w * s)[:, None] * U)
        HM = np.asarray(csr.T @ R)
        lam = float(np.sum(HM * M))
        M = HM
    return lam


def empirical_minimizer(
    ds: InteractionDataset, users, X: PublicFeatureMatrix, bound: float, d: int,
    steps: int = 20000, tol: float = 1e-13,
) -> LinearEncoder:
    """Projected gradient descent at step ``1/L`` from zero until the loss stalls."""
    table = users.table if isinstance(users, UserEncoder) else np.asarray(users)
    U = table[ds.users]
    y = ds.labels
    w = ds.weights
    lr = 1.0 / (1.001 * lipschitz_constant(ds, users, X))
    enc = LinearEncoder(np.zeros((X.p, d)))
    prev = math.inf
    for _ in range(steps):
        V = enc.forward_all(X)
        r = w * (np.einsum("id,id->i", U, V[ds.items]) - y)
        R = np.zeros_like(V)
        np.add.at(R, ds.items, r[:, None] * U)
        enc = project_theta(enc.step(enc.vjp_all(X, R), lr), X, bound)
        cur = quadratic_loss(enc, users, ds, X)
        if prev - cur <= tol * max(1.0, cur):
            break
        prev = cur
    return enc


def excess_risk(
    theta_hat: np.ndarray | LinearEncoder, ds: InteractionDataset, users, X: PublicFeatureMatrix,
    reference: LinearEncoder | None = None, bound: float | None = None,
) -> float:
    """``L(theta_hat) - L(theta_ref)`` with ``theta_ref`` the in-set empirical minimizer.

    Pass ``reference`` to reuse a minimizer across many evaluations; otherwise
    it is computed with :func:`empirical_minimizer` under ``bound``.
    """
    enc = theta_hat if isinstance(theta_hat, LinearEncoder) else LinearEncoder(theta_hat)
    if reference is None:
        if bound is None:
            raise ValueError("need a reference minimizer or a bound")
        reference = empirical_minimizer(ds, users, X, bound, enc.d)
    return quadratic_loss(enc, users, ds, X) - quadratic_loss(reference, users, ds, X)


# ---------------------------------------------------------------------------
# Output


METRICS_HEADER = ["metric", "epsilon", "seed", "value"]


def write_metrics_csv(path, rows: Iterable[tuple[str, float, int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for metric, eps, seed, value in rows:
            w.writerow([metric, eps, seed, repr(float(value))])
