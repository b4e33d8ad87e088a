"""Command-line harness.

Subcommands: ``gen-data``, ``train``, ``sweep``, ``complexity`` and ``fedsim``.
Any flag can also come from a JSON file given with ``--config``; keys are the
flag names without the leading dashes (``"clip-u"`` or ``"clip_u"``) and flags
on the command line win. ``PUBFEAT_DP_THREADS`` caps the sweep worker pool.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .accountant import PrivacyError, PrivacySpec, per_user_normalized_weights
from .costmodel import cost_report, powerlaw_counts, write_cost_csv
from .dataio import (
    DataFormatError,
    InteractionDataset,
    SyntheticLinear,
    gen_synthetic_linear,
    load_feature_matrix,
    load_interactions,
    load_matrix,
    save_synthetic,
)
from .encoder import LinearEncoder, TwoLayerEncoder, UserEncoder, save_checkpoint
from .evalmetrics import rmse, write_metrics_csv
from .experiments import SWEEP_METRICS, run_ledger, sigma_for, sweep_point, train_test_split
from .fedsim import audit_server_view, check_transcript, monolithic_reference, run_federated_ssp2, split_by_user
from .rng import NoiseSource
from .trainers import (
    TrainConfig,
    alternating_minimization,
    dpsgd,
    predictions,
    quadratic_loss,
    ssp_convex,
    ssp_resampled,
    ssp1,
    ssp2,
)

ALGOS = ("ssp1", "ssp2", "ssp-convex", "dpsgd", "am-ssp", "am-dpsgd")


# ---------------------------------------------------------------------------
# Parser


def _data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", help="interactions CSV (user_id,item_id,rating); synthetic data if omitted")
    g.add_argument("--features", help="public feature CSV (item_id,feature_id,value)")
    g.add_argument("--users", help="user embedding table (row,col,value)")
    g.add_argument("--num-users", type=int, default=100)
    g.add_argument("--num-items", type=int, default=32)
    g.add_argument("--num-features", type=int, default=512)
    g.add_argument("--num-examples", type=int, default=5000)
    g.add_argument("--features-per-item", type=int, default=8)
    g.add_argument("--label-noise", type=float, default=0.1)


def _train_flags(p: argparse.ArgumentParser, privacy_required: bool = True) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epsilon", type=float, help="total privacy budget" + (" (required)" if privacy_required else ""))
    g.add_argument("--delta", type=float, help="privacy slack" + (" (required)" if privacy_required else ""))
    g.add_argument("--privacy-unit", choices=("example", "user"), default="example")
    g.add_argument("--wbar", type=float, default=1.0, help="per-user weight budget for user-level privacy")
    g.add_argument("--steps", type=int, default=100)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--outer-steps", type=int, default=5)
    g.add_argument("--inner-steps", type=int, default=10)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--lr-schedule", choices=("constant", "inv_sqrt"), default="constant")
    g.add_argument("--clip-u", type=float, default=1.0)
    g.add_argument("--clip-y", type=float, default=1.0)
    g.add_argument("--clip-g", type=float, default=1.0)
    g.add_argument("--clip-h", type=float, default=1.0)
    g.add_argument("--lambda-u", type=float, default=1.0)
    g.add_argument("--lambda-v", type=float, default=0.0)
    g.add_argument("--project-bound", type=float)
    g.add_argument("--encoder", choices=("linear", "two-layer"), default="linear")
    g.add_argument("--activation", choices=("identity", "tanh"), default="identity")
    g.add_argument("--loss", choices=("quadratic", "logistic"), default="quadratic")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pubfeat-dp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with default flag values")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--dim", type=int, default=4, help="embedding dimension d")
        return p

    p = add("gen-data", "write a synthetic bilinear dataset")
    _data_flags(p)

    p = add("train", "train one model and write trace, checkpoint and metrics")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--algo", choices=ALGOS, default="ssp2")
    p.add_argument("--resamples", type=int, help="renoise the statistics this many times (ssp1/ssp2 only)")

    p = add("sweep", "privacy/utility grid over epsilon, seed and algorithm")
    _data_flags(p)
    _train_flags(p, privacy_required=False)
    p.add_argument("--epsilons", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--algos", nargs="*", choices=ALGOS, default=["ssp1", "ssp2", "dpsgd"])
    p.add_argument("--resamples", type=int, nargs="*", default=[],
                   help="also run SSP that renoises r times, for each r")

    p = add("complexity", "cost ratio of SSP2 over DP-SGD")
    p.add_argument("--num-items", type=int, default=1000)
    p.add_argument("--num-examples", type=int, default=10**6)
    p.add_argument("--alpha", type=float, nargs="+", default=[0.5, 1.0])
    p.add_argument("--cost-c", type=float, help="per-item forward/backward cost (default 5 d^2)")
    p.add_argument("--batch-size", type=int, nargs="+", default=[1, 10, 100, 1000])
    p.add_argument("--epochs", type=float, nargs="+", default=[1, 10, 100])

    p = add("fedsim", "simulate one-round federated SSP2 and audit the transcript")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--no-verify", action="store_true", help="skip the in-process equivalence check")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre, _ = parser.parse_known_args(argv)
    config_path = getattr(pre, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {config_path}: {exc}")
        if not isinstance(config, dict):
            parser.error("config file must hold a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[pre.command]
        known = {a.dest for a in subparser._actions}
        defaults = {}
        for key, value in config.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                parser.error(f"unknown config key {key!r}")
            defaults[dest] = value
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Shared helpers


def _load_data(args) -> SyntheticLinear:
    if args.data:
        if not args.features:
            raise SystemExit("--features is required with --data")
        ds = load_interactions(args.data)
        X = load_feature_matrix(args.features)
        U = load_matrix(args.users) if args.users else None
        n = max(ds.n, 0 if U is None else len(U))
        if U is None:
            U = UserEncoder.init(n, args.dim, np.random.default_rng([args.seed, 3])).table
        if U.shape != (n, args.dim):
            raise SystemExit(f"user table has shape {U.shape}, expected ({n}, {args.dim})")
        ds = InteractionDataset(ds.users, ds.items, ds.labels, n=n, m=X.m)
        return SyntheticLinear(X, ds, None, U)
    return gen_synthetic_linear(
        args.num_items, args.num_users, args.num_features, args.dim, args.features_per_item,
        args.label_noise, args.seed, num_examples=args.num_examples,
    )


def _config(args, **overrides) -> TrainConfig:
    return TrainConfig(
        steps=args.steps, lr=args.lr, lr_schedule=args.lr_schedule, batch_size=args.batch_size,
        clip_u=args.clip_u, clip_y=args.clip_y, clip_g=args.clip_g, clip_h=args.clip_h,
        lambda_u=args.lambda_u, lambda_v=args.lambda_v, outer_steps=args.outer_steps,
        inner_steps=args.inner_steps, project_bound=args.project_bound, **overrides,
    )


def _require_privacy(parser, args) -> None:
    for name in ("epsilon", "delta"):
        if getattr(args, name) is None:
            parser.error(f"--{name} is required")


def _encoder(args, p: int):
    rng = np.random.default_rng([args.seed, 1])
    if args.encoder == "linear":
        return LinearEncoder.init(p, args.dim, rng)
    return TwoLayerEncoder.init(p, args.dim, rng, args.activation)


def _threads() -> int:
    raw = os.environ.get("PUBFEAT_DP_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise SystemExit(f"PUBFEAT_DP_THREADS must be an integer, got {raw!r}")
    return cap


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args, parser) -> int:
    try:
        data = _load_data(argparse.Namespace(**{**vars(args), "data": None}))
    except ValueError as exc:
        parser.error(str(exc))
    paths = save_synthetic(args.out, data)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_train(args, parser) -> int:
    _require_privacy(parser, args)
    if args.privacy_unit == "user" and args.algo in ("dpsgd", "am-dpsgd"):
        parser.error("user-level privacy is only implemented for SSP algorithms")
    if args.resamples is not None and args.algo not in ("ssp1", "ssp2"):
        parser.error("--resamples applies to ssp1/ssp2 only")
    data = _load_data(args)
    cfg = _config(args)
    algo = "resampled" if args.resamples is not None else args.algo
    try:
        PrivacySpec(args.epsilon, args.delta, unit=args.privacy_unit, wbar=args.wbar)
        sigma = sigma_for(algo, args.epsilon, args.delta, cfg, args.resamples, args.privacy_unit, args.wbar)
    except (PrivacyError, ValueError) as exc:
        parser.error(str(exc))
    print(f"# algo={args.algo} epsilon={args.epsilon} delta={args.delta} unit={args.privacy_unit} sigma={sigma:.4f}")

    train, test = train_test_split(data.interactions, 0.2, args.seed)
    if args.privacy_unit == "user":
        train = train.with_weights(per_user_normalized_weights(train, args.wbar))
    X = data.features
    enc = _encoder(args, X.p)
    noise = NoiseSource(args.seed, ("train",))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.algo.startswith("am-"):
        users = UserEncoder.init(train.n, args.dim, np.random.default_rng([args.seed, 2]))
        res = alternating_minimization(
            enc, users, train, X, cfg, "ssp2" if args.algo == "am-ssp" else "dpsgd", sigma, noise,
            args.delta, args.wbar if args.privacy_unit == "user" else 1.0,
        )
        enc, users, ledger = res.enc, res.users, res.ledger
        with open(out / "trace.csv", "w", encoding="utf-8") as fh:
            fh.write("step,loss,grad_norm,elapsed_ms\n")
            for s, obj in enumerate(res.objectives):
                fh.write(f"{s},{obj!r},nan,0\n")
    else:
        users = UserEncoder(data.users)
        runs = {"ssp1": ssp1, "ssp2": ssp2, "dpsgd": dpsgd}
        if algo == "resampled":
            enc, trace = ssp_resampled(enc, train, X, users, cfg, sigma, noise, args.resamples)
        elif algo == "ssp-convex":
            enc, trace = ssp_convex(enc, train, X, users, cfg, args.loss, sigma, noise)
        else:
            enc, trace = runs[algo](enc, train, X, users, cfg, sigma, noise)
        trace.write_csv(out / "trace.csv")
        wbar = args.wbar if args.privacy_unit == "user" else 1.0
        ledger = run_ledger(algo, cfg, sigma, args.delta, args.resamples, wbar)

    save_checkpoint(out / "checkpoint.csv", enc, users)
    ledger.write_csv(out / "privacy.csv")
    train_loss = quadratic_loss(enc, users, train, X)
    test_rmse = rmse(np.column_stack([predictions(enc, users, test, X), test.labels]))
    write_metrics_csv(out / "metrics.csv", [
        ("train_loss", args.epsilon, args.seed, train_loss),
        ("test_rmse", args.epsilon, args.seed, test_rmse),
        ("sigma", args.epsilon, args.seed, sigma),
        ("spent_epsilon", args.epsilon, args.seed, ledger.epsilon),
    ])
    print(f"train_loss={train_loss:.6g} test_rmse={test_rmse:.6g} spent_epsilon={ledger.epsilon:.6g}")
    ok = math.isfinite(train_loss) and ledger.epsilon <= args.epsilon * (1 + 1e-9)
    if not ok:
        print("audit failed: non-finite loss or budget exceeded", file=sys.stderr)
    return 0 if ok else 1


def _sweep_task(task):
    label, algo, eps, seed, data, cfg, delta, resamples = task
    return label, eps, seed, sweep_point(algo, eps, seed, data, cfg, delta, resamples)


def cmd_sweep(args, parser) -> int:
    delta = 1e-5 if args.delta is None else args.delta
    data = _load_data(args)
    cfg = _config(args)
    labels = [(a, a, None) for a in args.algos] + [(f"resamples={r}", "resampled", r) for r in args.resamples]
    if not labels:
        parser.error("nothing to run: give --algos or --resamples")
    for r in args.resamples:
        if not 1 <= r <= args.steps:
            parser.error(f"--resamples {r} must lie in [1, --steps]")
    tasks = [
        (label, algo, eps, seed, data, cfg, delta, r)
        for label, algo, r in labels for eps in args.epsilons for seed in args.seeds
    ]
    for eps in args.epsilons:
        try:
            PrivacySpec(eps, delta)
        except PrivacyError as exc:
            parser.error(str(exc))
    workers = min(_threads(), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(t) for t in tasks]
    results.sort(key=lambda r: ([l for l, _, _ in labels].index(r[0]), r[1], r[2]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("algo,epsilon,seed,metric,value\n")
        for label, eps, seed, metrics in results:
            for name in SWEEP_METRICS:
                fh.write(f"{label},{eps},{seed},{name},{metrics[name]!r}\n")
    bad = [r for r in results if not all(math.isfinite(v) for v in r[3].values())]
    print(f"wrote {len(results) * len(SWEEP_METRICS)} rows to {out / 'sweep.csv'}")
    return 1 if bad else 0


def cmd_complexity(args, parser) -> int:
    c = 5.0 * args.dim**2 if args.cost_c is None else args.cost_c
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for B in args.batch_size:
        if not 1 <= B <= args.num_examples:
            parser.error(f"batch size {B} must lie in [1, {args.num_examples}]")
    for alpha in args.alpha:
        counts = powerlaw_counts(args.num_items, alpha, args.num_examples)
        rows = cost_report(counts, args.num_examples, args.dim, c, args.batch_size, args.epochs)
        path = out / f"cost_alpha{alpha:g}.csv"
        write_cost_csv(path, rows)
        print(f"alpha={alpha:g}: {len(rows)} rows -> {path}")
    return 0


def cmd_fedsim(args, parser) -> int:
    _require_privacy(parser, args)
    data = _load_data(args)
    try:
        budget = PrivacySpec(args.epsilon, args.delta, unit="user", variant="ssp2", wbar=args.wbar)
    except PrivacyError as exc:
        parser.error(str(exc))
    cfg = _config(args)
    X = data.features
    clients = split_by_user(data.interactions)
    users = UserEncoder(data.users)
    enc0 = _encoder(args, X.p)
    res = run_federated_ssp2(X, clients, users, enc0, cfg, budget, NoiseSource(args.seed, ("fedsim",)))
    print(f"# federated ssp2 epsilon={args.epsilon} delta={args.delta} sigma={res.sigma:.4f} clients={len(clients)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.transcript.write_csv(out / "transcript.csv")
    save_checkpoint(out / "checkpoint.csv", res.enc)

    reports = {
        "server view": audit_server_view(res.transcript),
        "protocol": check_transcript(res.transcript, len(clients), X.m, args.dim),
    }
    ok = True
    for name, rep in reports.items():
        print(f"{name} audit: {'pass' if rep.passed else 'FAIL'}")
        for msg, why in rep.violations:
            print(f"  seq={msg.seq if msg else '-'} {why}", file=sys.stderr)
        ok &= rep.passed
    if not args.no_verify:
        ref, _ = monolithic_reference(X, clients, users, enc0, cfg, budget, NoiseSource(args.seed, ("fedsim",)))
        same = all(np.array_equal(ref.params[k], res.enc.params[k]) for k in ref.params)
        print(f"equivalence with in-process run: {'pass' if same else 'FAIL'}")
        ok &= same
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "complexity": cmd_complexity,
    "fedsim": cmd_fedsim,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _apply_config(parser, argv)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return COMMANDS[args.command](args, subparser)
    except (OSError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
