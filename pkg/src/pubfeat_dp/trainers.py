"""Training procedures for the public encoder and the alternating driver.

All item trainers share the same descent loop and differ only in where the
per-step gradient comes from:

* SSP1 renoises the statistics at every step, SSP2 noises them once, and
  :func:`ssp_resampled` interpolates between the two.
* The mini-batch variants sample examples (SSP1) or items (SSP2).
* :func:`dpsgd` clips per-example gradients and noises every parameter.

Noise is keyed by ``("stats", block)`` for statistics, ``("batch", t)`` for
batch sampling and ``("dpsgd", t, layer)`` for gradient noise, so two trainers
fed the same :class:`~pubfeat_dp.rng.NoiseSource` and schedule see the same
randomness.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from .accountant import AccountingLedger, RdpCurve, ssp_release_curve
from .dataio import InteractionDataset, PublicFeatureMatrix
from .encoder import LinearEncoder, PublicEncoder, UserEncoder, tree_add, tree_norm
from .rng import NoiseSource
from .suffstats import (
    ConvexStats,
    SuffStats,
    compute_convex_stats,
    compute_stats,
    get_loss,
    noise_convex_stats,
    noise_stats,
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100
    lr: float = 0.01
    lr_schedule: Literal["constant", "inv_sqrt"] = "constant"
    batch_size: int | None = None
    clip_u: float = 1.0
    clip_y: float = 1.0
    clip_g: float | None = None
    clip_h: float | None = None
    lambda_u: float = 1.0
    lambda_v: float = 0.0
    outer_steps: int = 1
    inner_steps: int = 1
    project_bound: float | None = None
    record_loss: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.outer_steps < 0 or self.inner_steps < 1:
            raise ValueError("step counts must be nonnegative (inner_steps >= 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "inv_sqrt"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if not (self.clip_u > 0 and self.clip_y > 0):
            raise ValueError("clip_u and clip_y must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_u < 0 or self.lambda_v < 0:
            raise ValueError("ridge penalties must be nonnegative")
        if self.project_bound is not None and not self.project_bound > 0:
            raise ValueError("project_bound must be positive")

    def lr_at(self, t: int) -> float:
        """Learning rate for 0-based step ``t``; ``inv_sqrt`` uses ``lr / sqrt(t + 1)``."""
        return self.lr if self.lr_schedule == "constant" else self.lr / math.sqrt(t + 1)


@dataclass(frozen=True)
class TraceRow:
    step: int
    loss: float
    grad_norm: float
    elapsed_ms: float


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)
    params: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "grad_norm", "elapsed_ms"])
            for r in self.rows:
                w.writerow([r.step, repr(r.loss), repr(r.grad_norm), f"{r.elapsed_ms:.3f}"])


# ---------------------------------------------------------------------------
# Losses and gradients


def predictions(enc: PublicEncoder, users, ds: InteractionDataset, X: PublicFeatureMatrix) -> np.ndarray:
    table = users.table if isinstance(users, UserEncoder) else np.asarray(users)
    V = enc.forward_all(X)
    return np.einsum("id,id->i", table[ds.users], V[ds.items])


def quadratic_loss(enc: PublicEncoder, users, ds: InteractionDataset, X: PublicFeatureMatrix) -> float:
    """Weighted squared loss ``sum w_i (u_i . v_{j_i} - y_i)^2 / 2`` with unclipped data."""
    r = predictions(enc, users, ds, X) - ds.labels
    return 0.5 * float(np.dot(ds.weights, r**2))


def regularized_objective(
    enc: PublicEncoder, users: UserEncoder, ds: InteractionDataset, X: PublicFeatureMatrix,
    lambda_u: float, lambda_v: float,
) -> float:
    """Squared loss plus ``lambda_u/2 sum_k |u_k|^2 + lambda_v/2 sum_j |v_j|^2``."""
    V = enc.forward_all(X)
    return (
        quadratic_loss(enc, users, ds, X)
        + 0.5 * lambda_u * float(np.sum(users.table**2))
        + 0.5 * lambda_v * float(np.sum(V**2))
    )


def exact_gradient_factored(enc: PublicEncoder, stats: SuffStats, X: PublicFeatureMatrix, ridge: float = 0.0):
    """``sum_j J_j^T (A_j v_j - b_j)`` from per-item statistics."""
    V = enc.forward_all(X)
    return enc.vjp_all(X, stats.residuals(V, ridge=ridge))


def exact_gradient_naive(enc: PublicEncoder, ds: InteractionDataset, users, X: PublicFeatureMatrix):
    """Per-example differentiation of the weighted squared loss, one example at a time."""
    table = users.table if isinstance(users, UserEncoder) else np.asarray(users)
    total = None
    for i in range(ds.D):
        x = X.row(int(ds.items[i]))
        u = table[ds.users[i]]
        v = enc.forward(x)
        g = enc.vjp(x, ds.weights[i] * (float(u @ v) - ds.labels[i]) * u)
        total = g if total is None else tree_add(total, g)
    if total is None:
        total = {k: np.zeros_like(v) for k, v in enc.params.items()}
    return total


def item_gradient_term(enc: PublicEncoder, X: PublicFeatureMatrix, stats: SuffStats, j: int):
    """Contribution of item ``j`` alone to the factored gradient."""
    x = X.row(j)
    return enc.vjp(x, stats.A[j] @ enc.forward(x) - stats.b[j])


# ---------------------------------------------------------------------------
# Projection and the utility-theorem schedule


def project_theta(enc: LinearEncoder, X: PublicFeatureMatrix, bound: float) -> LinearEncoder:
    """Rescale ``theta`` so that ``max_j |theta^T x_j| <= bound``.

    This restores feasibility by scaling; it is not the Euclidean projection.
    """
    if not isinstance(enc, LinearEncoder):
        raise TypeError("project_theta requires a linear encoder")
    if not bound > 0:
        raise ValueError("bound must be positive")
    worst = float(np.linalg.norm(enc.forward_all(X), axis=1).max())
    if worst <= bound:
        return enc
    return LinearEncoder(enc.theta * (bound / worst))


def theta_diameter(X: PublicFeatureMatrix, bound: float) -> float:
    """Diameter of the feasible set restricted to the row space of ``X``.

    Any feasible ``theta`` there has ``|theta|_F <= |X theta|_F / s_min <= sqrt(m) bound / s_min``
    with ``s_min`` the smallest nonzero singular value of ``X``.
    """
    s = np.linalg.svd(X.toarray(), compute_uv=False)
    s_min = s[s > s.max() * 1e-10].min()
    return 2.0 * math.sqrt(X.m) * bound / s_min


@dataclass(frozen=True)
class TheoremSchedule:
    steps: int
    sigma: float
    lr0: float
    diameter: float
    gamma: float


def theorem_schedule(
    D: int, m: int, d: int, rho: float, diameter: float, gamma: float, dim: int | None = None,
    max_steps: int | None = None,
) -> TheoremSchedule:
    """Step count ``D^2 / (dim * d * rho^2)`` (floored), ``sigma = rho sqrt(T)`` and
    ``lr_t = diameter / (gamma * D * sqrt(8 (t + 1)))``.

    ``dim`` defaults to the item count ``m``; passing the feature count gives
    the matching schedule for noisy gradient descent.
    """
    dim = m if dim is None else dim
    steps = max(1, int(D**2 / (dim * d * rho**2))) if rho > 0 else (max_steps or 1)
    if max_steps is not None:
        steps = min(steps, max_steps)
    return TheoremSchedule(steps, rho * math.sqrt(steps), diameter / (gamma * D * math.sqrt(8.0)), diameter, gamma)


# ---------------------------------------------------------------------------
# Shared descent loop


def _descend(
    enc: PublicEncoder,
    cfg: TrainConfig,
    steps: int,
    grad_fn: Callable[[int, PublicEncoder], dict],
    loss_fn: Callable[[PublicEncoder], float] | None,
    X: PublicFeatureMatrix,
) -> tuple[PublicEncoder, TrainTrace]:
    if cfg.project_bound is not None and not isinstance(enc, LinearEncoder):
        raise TypeError("projection is only defined for linear encoders")
    trace = TrainTrace()
    start = time.perf_counter()

    def loss_of(e):
        return loss_fn(e) if (loss_fn is not None and cfg.record_loss) else math.nan

    for t in range(steps):
        G = grad_fn(t, enc)
        trace.rows.append(TraceRow(t, loss_of(enc), tree_norm(G), 1e3 * (time.perf_counter() - start)))
        enc = enc.step(G, cfg.lr_at(t))
        if cfg.project_bound is not None:
            enc = project_theta(enc, X, cfg.project_bound)
    trace.rows.append(TraceRow(steps, loss_of(enc), math.nan, 1e3 * (time.perf_counter() - start)))
    trace.params = {k: v.copy() for k, v in enc.params.items()}
    return enc, trace


def _probe(ds, users, X, probe):
    if probe is None:
        return lambda e: quadratic_loss(e, users, ds, X)
    probe_ds, probe_users = probe
    return lambda e: quadratic_loss(e, probe_users, probe_ds, X)


def _from_stats(
    enc: PublicEncoder, X: PublicFeatureMatrix, cfg: TrainConfig, steps: int,
    stats_at: Callable[[int], SuffStats], loss_fn,
) -> tuple[PublicEncoder, TrainTrace]:
    def grad(t, e):
        V = e.forward_all(X)
        return e.vjp_all(X, stats_at(t).residuals(V, ridge=cfg.lambda_v))

    return _descend(enc, cfg, steps, grad, loss_fn, X)


# ---------------------------------------------------------------------------
# SSP trainers


def ssp_resampled(
    enc: PublicEncoder, ds: InteractionDataset, X: PublicFeatureMatrix, users, cfg: TrainConfig,
    sigma: float, noise: NoiseSource, resamples: int, probe=None,
) -> tuple[PublicEncoder, TrainTrace]:
    """Full-batch SSP that draws fresh statistics noise ``resamples`` times.

    Step ``t`` uses noise block ``t * resamples // steps``; ``resamples=1`` is
    SSP2 and ``resamples=steps`` is SSP1. ``sigma`` must already account for
    ``resamples`` releases.
    """
    T = cfg.steps
    if not 1 <= resamples <= max(T, 1):
        raise ValueError("resamples must lie in [1, steps]")
    stats = compute_stats(ds, users, cfg.clip_u, cfg.clip_y, m=X.m)
    cache: dict[int, SuffStats] = {}

    def stats_at(t):
        block = t * resamples // T
        if block not in cache:
            cache.clear()
            cache[block] = noise_stats(stats, sigma, cfg.clip_u, cfg.clip_y, noise, ("stats", block))
        return cache[block]

    if T > 0:
        stats_at(0)
    return _from_stats(enc, X, cfg, T, stats_at, _probe(ds, users, X, probe))


def ssp1(enc, ds, X, users, cfg: TrainConfig, sigma: float, noise: NoiseSource, probe=None):
    """Sufficient statistics perturbation with independent noise at every step."""
    return ssp_resampled(enc, ds, X, users, cfg, sigma, noise, resamples=max(cfg.steps, 1), probe=probe)


def ssp2(enc, ds, X, users, cfg: TrainConfig, sigma: float, noise: NoiseSource, probe=None):
    """Sufficient statistics perturbation with one noise draw reused for all steps."""
    stats = compute_stats(ds, users, cfg.clip_u, cfg.clip_y, m=X.m)
    noised = noise_stats(stats, sigma, cfg.clip_u, cfg.clip_y, noise, ("stats", 0))
    return _from_stats(enc, X, cfg, cfg.steps, lambda t: noised, _probe(ds, users, X, probe))


def _sample(gen: np.random.Generator, population: int, size: int) -> np.ndarray:
    if not 1 <= size <= population:
        raise ValueError(f"batch size {size} must lie in [1, {population}]")
    if size == population:
        return np.arange(population)
    return np.sort(gen.choice(population, size=size, replace=False))


def ssp2_minibatch_from_stats(
    enc: PublicEncoder, X: PublicFeatureMatrix, noised: SuffStats, cfg: TrainConfig,
    noise: NoiseSource, loss_fn=None,
) -> tuple[PublicEncoder, TrainTrace]:
    """Server-side loop: gradient steps over sampled items using released statistics only."""
    B = X.m if cfg.batch_size is None else cfg.batch_size

    def grad(t, e):
        batch = _sample(noise.generator("batch", t), X.m, B)
        Xb = X.subset(batch)
        V = e.forward_all(Xb)
        return e.vjp_all(Xb, noised.residuals(V, items=batch, ridge=cfg.lambda_v))

    return _descend(enc, cfg, cfg.steps, grad, loss_fn, X)


def ssp2_minibatch(enc, ds, X, users, cfg: TrainConfig, sigma: float, noise: NoiseSource, probe=None):
    """SSP2 where each step sums the gradient over ``batch_size`` sampled items."""
    stats = compute_stats(ds, users, cfg.clip_u, cfg.clip_y, m=X.m)
    noised = noise_stats(stats, sigma, cfg.clip_u, cfg.clip_y, noise, ("stats", 0))
    return ssp2_minibatch_from_stats(enc, X, noised, cfg, noise, _probe(ds, users, X, probe))


def ssp1_minibatch(enc, ds, X, users, cfg: TrainConfig, sigma: float, noise: NoiseSource, probe=None):
    """SSP1 where each step builds statistics from ``batch_size`` sampled examples."""
    B = ds.D if cfg.batch_size is None else cfg.batch_size

    def stats_at(t):
        batch = _sample(noise.generator("batch", t), ds.D, B)
        stats = compute_stats(ds.subset(batch), users, cfg.clip_u, cfg.clip_y, m=X.m)
        return noise_stats(stats, sigma, cfg.clip_u, cfg.clip_y, noise, ("stats", t))

    return _from_stats(enc, X, cfg, cfg.steps, stats_at, _probe(ds, users, X, probe))


def dpsgd(enc, ds, X, users, cfg: TrainConfig, sigma: float, noise: NoiseSource, probe=None):
    """Mini-batch DP-SGD with per-example clipping at ``clip_g`` and dense noise.

    Forward passes and Jacobians are computed once per distinct item in the
    batch; clipped per-example residuals are pooled per item before the
    Jacobian product, which is exact because the product is linear.
    """
    clip_g = math.inf if cfg.clip_g is None else cfg.clip_g
    if sigma > 0 and not math.isfinite(clip_g):
        raise ValueError("dpsgd with noise needs a finite clip_g")
    table = users.table if isinstance(users, UserEncoder) else np.asarray(users)
    B = ds.D if cfg.batch_size is None else cfg.batch_size

    def grad(t, e):
        batch = _sample(noise.generator("batch", t), ds.D, B)
        items = ds.items[batch]
        distinct = np.unique(items)
        pos = np.searchsorted(distinct, items)
        Xb = X.subset(distinct)
        V = e.forward_all(Xb)
        u = table[ds.users[batch]]
        r = (np.einsum("id,id->i", u, V[pos]) - ds.labels[batch])[:, None] * u
        if math.isfinite(clip_g):
            norms = e.per_example_grad_norms(Xb, pos, r)
            r = r * np.minimum(1.0, clip_g / np.maximum(norms, np.finfo(float).tiny))[:, None]
        R = np.zeros((len(distinct), e.d))
        np.add.at(R, pos, r)
        G = e.vjp_all(Xb, R)
        if sigma > 0:
            G = {k: v + sigma * clip_g * noise.normal(("dpsgd", t, k), v.shape) for k, v in G.items()}
        if cfg.lambda_v:
            G = tree_add(G, e.vjp_all(X, cfg.lambda_v * e.forward_all(X)))
        return G

    return _descend(enc, cfg, cfg.steps, grad, _probe(ds, users, X, probe), X)


def projected_ssp1(
    enc: LinearEncoder, ds, X, users, cfg: TrainConfig, rho: float, noise: NoiseSource,
    bound: float | None = None, diameter: float | None = None, max_steps: int | None = None, probe=None,
):
    """SSP1 with per-step projection and the utility-theorem schedule.

    ``bound`` defaults to ``clip_y / clip_u``. The step count and
    ``sigma`` follow from ``rho`` and the data shape; the learning rate
    decays as ``1/sqrt(t)``.
    Returns ``(encoder, trace, schedule)``.
    """
    if not isinstance(enc, LinearEncoder):
        raise TypeError("projected_ssp1 requires a linear encoder")
    bound = cfg.clip_y / cfg.clip_u if bound is None else bound
    diameter = theta_diameter(X, bound) if diameter is None else diameter
    gamma = X.norm_bound * cfg.clip_u * cfg.clip_y
    sched = theorem_schedule(ds.D, X.m, enc.d, rho, diameter, gamma, max_steps=max_steps)
    run_cfg = replace(cfg, steps=sched.steps, lr=sched.lr0, lr_schedule="inv_sqrt", project_bound=bound)
    enc, trace = ssp1(enc, ds, X, users, run_cfg, sched.sigma, noise, probe=probe)
    return enc, trace, sched


# ---------------------------------------------------------------------------
# Convex losses


def ssp_convex(
    enc: PublicEncoder, ds, X, users, cfg: TrainConfig, loss, sigma: float, noise: NoiseSource,
) -> tuple[PublicEncoder, TrainTrace]:
    """Successive quadratic models in item-output space, renoised every outer round.

    ``cfg.steps`` outer rounds of ``cfg.inner_steps`` constant-rate gradient
    steps. The trace has one row per outer round with the true loss.
    """
    loss = get_loss(loss)
    if cfg.clip_h is None or cfg.clip_g is None:
        raise ValueError("ssp_convex needs clip_h and clip_g")
    table = users.table if isinstance(users, UserEncoder) else np.asarray(users)

    def true_loss(e):
        s = np.einsum("id,id->i", table[ds.users], e.forward_all(X)[ds.items])
        return float(np.dot(ds.weights, loss.value(s, ds.labels)))

    trace = TrainTrace()
    start = time.perf_counter()
    for t in range(cfg.steps):
        stats = compute_convex_stats(ds, users, enc, X, loss, cfg.clip_h, cfg.clip_g, cfg.clip_u, cfg.clip_y)
        noised = noise_convex_stats(stats, sigma, cfg.clip_h, cfg.clip_g, noise, ("convex", t))
        first_norm = math.nan
        for tau in range(cfg.inner_steps):
            G = enc.vjp_all(X, noised.residuals(enc.forward_all(X)))
            if tau == 0:
                first_norm = tree_norm(G)
            enc = enc.step(G, cfg.lr)
        trace.rows.append(TraceRow(t, true_loss(enc), first_norm, 1e3 * (time.perf_counter() - start)))
    trace.params = {k: v.copy() for k, v in enc.params.items()}
    return enc, trace


def convex_inner_gradient(enc: PublicEncoder, X: PublicFeatureMatrix, stats: ConvexStats):
    return enc.vjp_all(X, stats.residuals(enc.forward_all(X)))


# ---------------------------------------------------------------------------
# User update and alternating minimization


def user_update_closed_form(
    users: UserEncoder, ds: InteractionDataset, enc: PublicEncoder, X: PublicFeatureMatrix, lambda_u: float
) -> UserEncoder:
    """Per-user ridge solution ``(sum v v^T + lambda_u I)^{-1} sum y v``.

    Users without examples keep their current row.
    """
    if not lambda_u > 0:
        raise ValueError("lambda_u must be positive")
    V = enc.forward_all(X)[ds.items]
    n, d = users.table.shape
    M = np.zeros((n, d, d))
    rhs = np.zeros((n, d))
    np.add.at(M, ds.users, V[:, :, None] * V[:, None, :])
    np.add.at(rhs, ds.users, ds.labels[:, None] * V)
    active = np.bincount(ds.users, minlength=n) > 0
    table = users.table.copy()
    if active.any():
        table[active] = np.linalg.solve(M[active] + lambda_u * np.eye(d), rhs[active][:, :, None])[:, :, 0]
    return UserEncoder(table)


ITEM_TRAINERS = {
    "ssp1": ssp1,
    "ssp2": ssp2,
    "ssp2_minibatch": ssp2_minibatch,
    "ssp1_minibatch": ssp1_minibatch,
    "dpsgd": dpsgd,
}


@dataclass
class AMResult:
    enc: PublicEncoder
    users: UserEncoder
    objectives: list[float]
    ledger: AccountingLedger
    item_traces: list[TrainTrace]


def _charge(ledger: AccountingLedger, trainer: str, cfg: TrainConfig, sigma: float, wbar: float) -> None:
    releases = 1 if trainer in ("ssp2", "ssp2_minibatch") else cfg.steps
    half = ssp_release_curve(sigma, wbar).beta / 2 if sigma > 0 else math.inf
    for _ in range(releases):
        if trainer == "dpsgd":
            ledger.record("gradient", RdpCurve(2 * half), sigma)
        else:
            ledger.record("A", RdpCurve(half), sigma)
            ledger.record("b", RdpCurve(half), sigma)


def alternating_minimization(
    enc: PublicEncoder, users: UserEncoder, ds: InteractionDataset, X: PublicFeatureMatrix,
    cfg: TrainConfig, item_trainer: str, sigma: float, noise: NoiseSource,
    delta: float = 1e-5, wbar: float = 1.0,
) -> AMResult:
    """Alternate the exact user update with a private item update for ``outer_steps`` rounds.

    Only item-side releases are charged to the ledger: ``ssp2`` charges one
    ``(A, b)`` pair per round, ``ssp1`` one pair per step and ``dpsgd`` one
    gradient per step (at the same rate as a statistics pair).
    """
    if item_trainer not in ITEM_TRAINERS:
        raise ValueError(f"unknown item trainer {item_trainer!r}")
    trainer = ITEM_TRAINERS[item_trainer]
    ledger = AccountingLedger(delta)
    objectives = [regularized_objective(enc, users, ds, X, cfg.lambda_u, cfg.lambda_v)]
    traces = []
    for s in range(cfg.outer_steps):
        users = user_update_closed_form(users, ds, enc, X, cfg.lambda_u)
        enc, tr = trainer(enc, ds, X, users, cfg, sigma, noise.fork("round", s))
        _charge(ledger, item_trainer, cfg, sigma, wbar)
        traces.append(tr)
        objectives.append(regularized_objective(enc, users, ds, X, cfg.lambda_u, cfg.lambda_v))
    return AMResult(enc, users, objectives, ledger, traces)
