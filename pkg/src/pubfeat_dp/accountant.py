"""Noise calibration and Renyi-DP bookkeeping.

Every mechanism here is summarized by a single number ``beta``: the mechanism
is ``(alpha, alpha * beta)``-RDP for all ``alpha > 1``. Betas add under
composition and ``beta <= eps^2 / (8 log(1/delta))`` implies
``(eps, delta)``-DP. Logarithms are natural.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .dataio import InteractionDataset, Partition, partition as make_partition
from .rng import NoiseSource

Unit = Literal["example", "user"]
Variant = Literal["ssp1", "ssp2", "ssp_convex", "dpsgd"]

VARIANTS = ("ssp1", "ssp2", "ssp_convex", "dpsgd")


class PrivacyError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    unit: Unit = "example"
    variant: Variant = "ssp2"
    steps: int = 1
    wbar: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PrivacyError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise PrivacyError("delta must lie in (0, 1)")
        if not self.epsilon < math.log(1 / self.delta):
            raise PrivacyError(
                f"epsilon={self.epsilon} must be smaller than log(1/delta)={math.log(1 / self.delta):.4f}"
            )
        if self.unit not in ("example", "user"):
            raise PrivacyError(f"unknown privacy unit {self.unit!r}")
        if self.variant not in VARIANTS:
            raise PrivacyError(f"unknown variant {self.variant!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise PrivacyError("steps must be a positive integer")
        if self.unit == "user" and not self.wbar > 0:
            raise PrivacyError("wbar must be positive for user-level privacy")

    @property
    def releases(self) -> int:
        """Number of noisy statistic (or gradient) releases the variant makes."""
        return 1 if self.variant == "ssp2" else int(self.steps)

    @property
    def sensitivity_scale(self) -> float:
        return self.wbar if self.unit == "user" else 1.0

    @property
    def beta_budget(self) -> float:
        return beta_budget(self.epsilon, self.delta)


@dataclass(frozen=True)
class RdpCurve:
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        return RdpCurve(self.beta + other.beta)

    def rdp(self, alpha: float) -> float:
        return alpha * self.beta


def beta_budget(epsilon: float, delta: float) -> float:
    return epsilon**2 / (8.0 * math.log(1.0 / delta))


def sigma_for_releases(epsilon: float, delta: float, releases: int, scale: float = 1.0) -> float:
    """Noise multiplier so that ``releases`` statistic pairs fit in the budget."""
    return scale * math.sqrt(8.0 * releases * math.log(1.0 / delta)) / epsilon


def calibrate_sigma(budget: PrivacySpec) -> float:
    """Noise multiplier for the variant; ``ssp2`` is independent of ``steps``.

    ``dpsgd`` is charged like ``ssp1`` (one statistic pair per step, no
    amplification by subsampling), which is conservative.
    """
    return sigma_for_releases(budget.epsilon, budget.delta, budget.releases, budget.sensitivity_scale)


def rdp_compose(curves: Iterable[RdpCurve]) -> RdpCurve:
    return RdpCurve(math.fsum(c.beta for c in curves))


def rdp_to_dp(curve: RdpCurve, delta: float) -> float:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(8.0 * curve.beta * math.log(1.0 / delta))


def gaussian_curve(sigma: float) -> RdpCurve:
    """Gaussian mechanism whose noise std is ``sigma`` times its L2 sensitivity."""
    if sigma == 0:
        return RdpCurve(math.inf)
    return RdpCurve(1.0 / (2.0 * sigma**2))


def ssp_release_curve(sigma: float, wbar: float = 1.0) -> RdpCurve:
    """One release of all ``(A_j, b_j)``: two Gaussian mechanisms of sensitivity ``wbar``."""
    if sigma == 0:
        return RdpCurve(math.inf)
    return RdpCurve(wbar**2 / sigma**2)


# ---------------------------------------------------------------------------
# Item counts and example weights


def noisy_item_counts(
    ds: InteractionDataset, sigma_count: float, noise: NoiseSource, m: int | None = None, floor: bool = True
) -> np.ndarray:
    """``|items == j| + sigma_count * N(0, 1)`` per item, floored at 1 by default."""
    if sigma_count < 0:
        raise ValueError("sigma_count must be nonnegative")
    m = ds.m if m is None else m
    counts = np.bincount(ds.items, minlength=m).astype(np.float64)
    if sigma_count > 0:
        counts = counts + sigma_count * np.array([noise.normal(("count", j), ())[()] for j in range(m)])
    return np.maximum(counts, 1.0) if floor else counts


def _pooled_norm(items: np.ndarray, w: np.ndarray) -> float:
    """L2 norm of one user's weights after summing duplicates of the same item."""
    _, inv = np.unique(items, return_inverse=True)
    return math.sqrt(math.fsum(np.bincount(inv, weights=w) ** 2))


def _normalize_per_user(ds: InteractionDataset, raw: np.ndarray, wbar: float, part: Partition | None) -> np.ndarray:
    if not wbar > 0:
        raise ValueError("wbar must be positive")
    part = make_partition(ds) if part is None else part
    w = np.zeros(ds.D)
    for idx in part.by_user.values():
        w[idx] = wbar * raw[idx] / _pooled_norm(ds.items[idx], raw[idx])
    return w


def budget_weights(
    ds: InteractionDataset, counts: np.ndarray, wbar: float, part: Partition | None = None
) -> np.ndarray:
    """Per-example weights giving every user a pooled weight norm of exactly ``wbar``.

    Within a user the weight of an example on item ``j`` is proportional to
    ``counts[j] ** -0.25``, so tail items get larger weights. Repeated
    examples of one item are pooled before normalizing (see
    :func:`max_user_weight_norm`).
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("counts must be >= 1")
    return _normalize_per_user(ds, counts[ds.items] ** -0.25, wbar, part)


def per_user_normalized_weights(ds: InteractionDataset, wbar: float, part: Partition | None = None) -> np.ndarray:
    """Equal weights within a user, scaled to a pooled weight norm of ``wbar``."""
    return _normalize_per_user(ds, np.ones(ds.D), wbar, part)


def max_user_weight_norm(ds: InteractionDataset, part: Partition | None = None) -> float:
    """``max_k sqrt(sum_j (sum of w_i over user k's examples on item j)^2)``.

    Removing user ``k`` shifts ``A_j`` by ``(sum_i w_i) u_k u_k^T`` for each of
    its items, so duplicates add linearly. Without duplicates this is the
    plain ``sqrt(max_k sum_i w_i^2)``.
    """
    part = make_partition(ds) if part is None else part
    if not part.by_user:
        return 0.0
    return max(_pooled_norm(ds.items[idx], ds.weights[idx]) for idx in part.by_user.values())


@dataclass(frozen=True)
class BudgetSplit:
    sigma_stats: float
    sigma_count: float
    beta_stats: float
    beta_count: float


def split_budget(
    budget: PrivacySpec, count_budget_fraction: float = 0.05, count_sensitivity: float = 1.0
) -> BudgetSplit:
    """Share the budget between a noisy-count release and the statistics releases.

    The count release is a Gaussian mechanism with L2 sensitivity
    ``count_sensitivity``; the rest of ``beta`` goes to ``budget.releases``
    statistic releases.
    """
    if not 0 < count_budget_fraction < 1:
        raise ValueError("count_budget_fraction must lie in (0, 1)")
    total = budget.beta_budget
    beta_count = count_budget_fraction * total
    beta_stats = total - beta_count
    sigma_stats = budget.sensitivity_scale * math.sqrt(budget.releases / beta_stats)
    sigma_count = count_sensitivity / math.sqrt(2.0 * beta_count)
    return BudgetSplit(sigma_stats, sigma_count, beta_stats, beta_count)


# ---------------------------------------------------------------------------
# Report


@dataclass
class AccountingLedger:
    """Record of every noisy release made by a run."""

    delta: float
    entries: list[tuple[str, float, float]] = field(default_factory=list)

    def record(self, mechanism: str, curve: RdpCurve, sigma: float) -> None:
        self.entries.append((mechanism, curve.beta, sigma))

    def total(self) -> RdpCurve:
        return rdp_compose(RdpCurve(b) for _, b, _ in self.entries)

    @property
    def epsilon(self) -> float:
        return rdp_to_dp(self.total(), self.delta)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["mechanism", "beta", "sigma", "epsilon", "delta"])
            for name, beta, sigma in self.entries:
                w.writerow([name, repr(beta), repr(sigma), repr(rdp_to_dp(RdpCurve(beta), self.delta)), self.delta])
            total = self.total()
            w.writerow(["total", repr(total.beta), "", repr(rdp_to_dp(total, self.delta)), self.delta])
