"""Scaled-down experiments behind the acceptance checks and the sweep command."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple

import numpy as np

from .accountant import AccountingLedger, PrivacySpec, RdpCurve, calibrate_sigma, sigma_for_releases, ssp_release_curve
from .dataio import InteractionDataset, SyntheticLinear, gen_synthetic_linear
from .encoder import LinearEncoder, UserEncoder
from .evalmetrics import empirical_minimizer, lipschitz_constant, rmse
from .rng import NoiseSource
from .trainers import (
    TrainConfig,
    alternating_minimization,
    dpsgd,
    predictions,
    projected_ssp1,
    quadratic_loss,
    ssp_convex,
    ssp_resampled,
    ssp1,
    ssp2,
)


@dataclass(frozen=True)
class Instance:
    m: int = 32
    p: int = 512
    d: int = 4
    n: int = 100
    D: int = 5000
    features_per_item: int = 8
    label_noise_std: float = 0.1

    def generate(self, seed: int) -> SyntheticLinear:
        return gen_synthetic_linear(
            self.m, self.n, self.p, self.d, self.features_per_item, self.label_noise_std, seed, num_examples=self.D
        )


STANDARD = Instance()


# ---------------------------------------------------------------------------
# Utility separation between projected SSP1 and projected noisy GD


class UtilityTrial(NamedTuple):
    seed: int
    risk_ssp: float
    risk_gd: float
    steps: int
    sigma: float


def utility_trial(
    seed: int, epsilon: float = 1.0, delta: float = 1e-5, instance: Instance = STANDARD,
    clip_u: float = 1.0, clip_y: float = 6.0,
) -> UtilityTrial:
    """Excess empirical risk of projected SSP1 and projected noisy GD under one budget.

    Both start at zero and share the step schedule and projection set. They
    are calibrated to the same ``(epsilon, delta)``. Noisy GD is full-batch
    DP-SGD clipped at the gradient bound ``|x| clip_u clip_y``.
    """
    data = instance.generate(seed)
    X, ds, users = data.features, data.interactions, UserEncoder(data.users)
    bound = clip_y / clip_u
    rho = sigma_for_releases(epsilon, delta, 1)
    start = LinearEncoder(np.zeros((X.p, instance.d)))
    cfg = TrainConfig(clip_u=clip_u, clip_y=clip_y, record_loss=False)
    enc_ssp, _, sched = projected_ssp1(start, ds, X, users, cfg, rho, NoiseSource(seed, ("ssp1",)), bound=bound)

    sigma_gd = calibrate_sigma(PrivacySpec(epsilon, delta, variant="dpsgd", steps=sched.steps))
    gd_cfg = replace(
        cfg, steps=sched.steps, lr=sched.lr0, lr_schedule="inv_sqrt", project_bound=bound, clip_g=sched.gamma
    )
    enc_gd, _ = dpsgd(start, ds, X, users, gd_cfg, sigma_gd, NoiseSource(seed, ("dpsgd",)))

    ref = empirical_minimizer(ds, users, X, bound, instance.d)
    base = quadratic_loss(ref, users, ds, X)
    return UtilityTrial(
        seed,
        quadratic_loss(enc_ssp, users, ds, X) - base,
        quadratic_loss(enc_gd, users, ds, X) - base,
        sched.steps,
        sched.sigma,
    )


class UtilitySummary(NamedTuple):
    trials: list[UtilityTrial]
    wins: int
    median_ratio: float


def utility_experiment(seeds: Iterable[int] = range(10), **kwargs) -> UtilitySummary:
    trials = [utility_trial(s, **kwargs) for s in seeds]
    wins = sum(t.risk_ssp < t.risk_gd for t in trials)
    ratio = float(np.median([t.risk_ssp / t.risk_gd for t in trials]))
    return UtilitySummary(trials, wins, ratio)


# ---------------------------------------------------------------------------
# Noise resampling


def resampling_trial(
    seed: int, resamples: int, steps: int = 16, epsilon: float = 1.0, delta: float = 1e-5,
    instance: Instance = STANDARD, clip_u: float = 1.0, clip_y: float = 6.0,
) -> float:
    """Final training loss of projected SSP that renoises the statistics ``resamples`` times."""
    data = instance.generate(seed)
    X, ds, users = data.features, data.interactions, UserEncoder(data.users)
    sigma = sigma_for_releases(epsilon, delta, resamples)
    lr = 1.0 / lipschitz_constant(ds, users, X)
    cfg = TrainConfig(
        steps=steps, lr=lr, clip_u=clip_u, clip_y=clip_y, project_bound=clip_y / clip_u, record_loss=False
    )
    start = LinearEncoder(np.zeros((X.p, instance.d)))
    enc, _ = ssp_resampled(start, ds, X, users, cfg, sigma, NoiseSource(seed, ("resample",)), resamples)
    return quadratic_loss(enc, users, ds, X)


def resampling_experiment(
    seeds: Iterable[int] = range(10), resamples: Iterable[int] = (1, 4, 16), **kwargs
) -> dict[int, list[float]]:
    seeds = list(seeds)
    return {r: [resampling_trial(s, r, **kwargs) for s in seeds] for r in resamples}


# ---------------------------------------------------------------------------
# Privacy/utility sweep


SWEEP_METRICS = ("sigma", "train_loss", "test_rmse")


def train_test_split(ds: InteractionDataset, test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.D)
    cut = int(round(ds.D * (1 - test_fraction)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


def sweep_point(
    algo: str, epsilon: float, seed: int, data: SyntheticLinear, cfg: TrainConfig,
    delta: float = 1e-5, resamples: int | None = None,
) -> dict[str, float]:
    """Train one configuration on a train split and report :data:`SWEEP_METRICS`."""
    train, test = train_test_split(data.interactions, 0.2, seed)
    X = data.features
    users = UserEncoder(data.users)
    enc0 = LinearEncoder.init(X.p, users.d, np.random.default_rng([seed, 1]))
    noise = NoiseSource(seed, ("sweep",))
    if algo == "am-ssp" or algo == "am-dpsgd":
        users = UserEncoder.init(users.n, users.d, np.random.default_rng([seed, 2]))
    sigma = sigma_for(algo, epsilon, delta, cfg, resamples)
    if algo == "ssp1":
        enc, _ = ssp1(enc0, train, X, users, cfg, sigma, noise)
    elif algo == "ssp2":
        enc, _ = ssp2(enc0, train, X, users, cfg, sigma, noise)
    elif algo == "resampled":
        enc, _ = ssp_resampled(enc0, train, X, users, cfg, sigma, noise, resamples)
    elif algo == "dpsgd":
        enc, _ = dpsgd(enc0, train, X, users, cfg, sigma, noise)
    elif algo == "ssp-convex":
        enc, _ = ssp_convex(enc0, train, X, users, cfg, "quadratic", sigma, noise)
    elif algo in ("am-ssp", "am-dpsgd"):
        res = alternating_minimization(
            enc0, users, train, X, cfg, "ssp2" if algo == "am-ssp" else "dpsgd", sigma, noise, delta
        )
        enc, users = res.enc, res.users
    else:
        raise ValueError(f"unknown algo {algo!r}")
    preds = predictions(enc, users, test, X)
    return {
        "sigma": sigma,
        "train_loss": quadratic_loss(enc, users, train, X),
        "test_rmse": rmse(np.column_stack([preds, test.labels])),
    }


def sigma_for(algo: str, epsilon: float, delta: float, cfg: TrainConfig, resamples: int | None = None,
              unit: str = "example", wbar: float = 1.0) -> float:
    """Noise multiplier for ``algo`` under the total budget ``(epsilon, delta)``."""
    scale = wbar if unit == "user" else 1.0
    if algo == "resampled":
        if resamples is None:
            raise ValueError("resampled needs resamples")
        return sigma_for_releases(epsilon, delta, resamples, scale)
    if algo in ("am-ssp", "am-dpsgd"):
        per_round = 1 if algo == "am-ssp" else cfg.steps
        return sigma_for_releases(epsilon, delta, max(cfg.outer_steps, 1) * per_round, scale)
    variant = {"ssp-convex": "ssp_convex"}.get(algo, algo)
    budget = PrivacySpec(epsilon, delta, unit=unit, variant=variant, steps=max(cfg.steps, 1), wbar=wbar)
    return calibrate_sigma(budget)


def run_ledger(
    algo: str, cfg: TrainConfig, sigma: float, delta: float, resamples: int | None = None, wbar: float = 1.0
) -> AccountingLedger:
    """Every noisy release a non-alternating run makes, one entry per release."""
    releases = {
        "ssp2": 1,
        "resampled": resamples,
        "ssp1": cfg.steps,
        "dpsgd": cfg.steps,
        "ssp-convex": cfg.steps,
    }[algo]
    ledger = AccountingLedger(delta)
    curve = ssp_release_curve(sigma, wbar)
    for _ in range(releases or 0):
        ledger.record(algo, RdpCurve(curve.beta), sigma)
    return ledger
