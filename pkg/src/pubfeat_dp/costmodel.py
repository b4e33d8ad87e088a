"""Cost model comparing SSP2 with DP-SGD.

One DP-SGD epoch touches an item once for every batch it appears in, while
SSP2 pays for one pass over the data to build statistics and then ``d^2`` per
item per step. All costs are in abstract units (``c`` is the cost of one
encoder forward/backward pass) and constant factors are dropped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class CostParams:
    D: int
    m: int
    d: int
    c: float
    epochs: float
    B: int

    def __post_init__(self):
        for name in ("D", "m", "d", "c", "epochs", "B"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.B > self.D:
            raise ValueError("batch size cannot exceed D")


def expected_item_visits(counts, D: int, B: int) -> tuple[np.ndarray, float]:
    """Expected number of batches per epoch containing each item.

    With ``D / B`` batches of ``B`` examples drawn independently with
    replacement, item ``j`` appears in a batch with probability
    ``1 - (1 - p_j)^B`` where ``p_j = counts[j] / D``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if not 1 <= B <= D:
        raise ValueError("need 1 <= B <= D")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    p = counts / D
    beta_j = (D / B) * (1.0 - (1.0 - p) ** B)
    return beta_j, float(beta_j.sum())


def simulate_item_visits(counts, D: int, B: int, epochs: int, seed: int = 0) -> np.ndarray:
    """Monte-Carlo estimate of :func:`expected_item_visits`, averaged over ``epochs``.

    Every batch draws ``B`` example indices uniformly with replacement; an
    item is visited by a batch if any drawn example belongs to it.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != D:
        raise ValueError("counts must sum to D")
    if D % B:
        raise ValueError("simulation needs B to divide D")
    m = len(counts)
    item_of = np.repeat(np.arange(m), counts)
    rng = np.random.default_rng(seed)
    per_epoch = D // B
    chunk = max(1, 2_000_000 // D)
    hits = np.zeros(m)
    done = 0
    while done < epochs:
        e = min(chunk, epochs - done)
        items = item_of[rng.integers(0, D, size=(e * per_epoch, B))]
        keys = np.unique(np.arange(e * per_epoch)[:, None] * m + items)
        hits += np.bincount(keys % m, minlength=m)
        done += e
    return hits / epochs


def cost_ratio(params: CostParams, beta: float) -> float:
    """SSP2 cost over DP-SGD cost: ``(m / beta)(1 + d^2/c + D d^2 / (c e m))``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    P = params
    return (P.m / beta) * (1 + P.d**2 / P.c + P.D * P.d**2 / (P.c * P.epochs * P.m))


def powerlaw_counts(m: int, alpha: float, D: int, seed: int | None = None) -> np.ndarray:
    """Item counts over ranks ``1..m`` with mass proportional to ``rank^-alpha``, summing to ``D``.

    Without a seed the counts are the expected ones rounded by largest
    remainder. With a seed ``D`` examples are drawn from the distribution.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if m < 1 or D < 0:
        raise ValueError("need m >= 1 and D >= 0")
    weights = np.arange(1, m + 1, dtype=np.float64) ** -alpha
    probs = weights / weights.sum()
    if seed is not None:
        return np.random.default_rng(seed).multinomial(D, probs)
    raw = probs * D
    counts = np.floor(raw).astype(np.int64)
    short = D - int(counts.sum())
    order = np.lexsort((np.arange(m), -(raw - counts)))
    counts[order[:short]] += 1
    return counts


COST_HEADER = ["B", "epochs", "beta", "ratio"]


def cost_report(counts, D: int, d: int, c: float, batch_sizes: Iterable[int], epochs: Iterable[float]):
    """Rows ``(B, epochs, beta, ratio)`` over a grid."""
    counts = np.asarray(counts)
    rows = []
    for B in batch_sizes:
        _, beta = expected_item_visits(counts, D, B)
        for e in epochs:
            rows.append((B, e, beta, cost_ratio(CostParams(D, len(counts), d, c, e, B), beta)))
    return rows


def write_cost_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COST_HEADER)
        for B, e, beta, ratio in rows:
            w.writerow([B, e, repr(float(beta)), repr(float(ratio))])
