"""In-process simulation of one-round federated SSP2.

Four roles exchange messages, each appended to a :class:`Transcript`:

    distributor --params--> every client      (one broadcast)
    client k    --upload--> aggregator        (u_k, item ids, labels)
    aggregator  --stats---> server            (noised A_j, b_j)

The aggregator stands in for secure aggregation and is the only role that
sees raw uploads. It releases noised statistics, and the server runs
mini-batch SSP2 on those plus the public features.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

from .accountant import PrivacySpec, budget_weights, calibrate_sigma, per_user_normalized_weights
from .dataio import InteractionDataset, PublicFeatureMatrix
from .encoder import PublicEncoder, UserEncoder
from .rng import NoiseSource
from .suffstats import SuffStats, compute_stats, noise_stats
from .trainers import TrainConfig, TrainTrace, ssp2_minibatch, ssp2_minibatch_from_stats

DISTRIBUTOR = "distributor"
AGGREGATOR = "aggregator"
SERVER = "server"
ALL_CLIENTS = "client:*"

LEGAL_EDGES = {
    "params": (DISTRIBUTOR, ALL_CLIENTS),
    "upload": ("client", AGGREGATOR),
    "stats": (AGGREGATOR, SERVER),
}


def client_role(k: int) -> str:
    return f"client:{k}"


def _role_kind(role: str) -> str:
    return "client" if role.startswith("client:") and role != ALL_CLIENTS else role


@dataclass(frozen=True)
class Message:
    seq: int
    sender: str
    receiver: str
    kind: str
    scalars: int
    payload: Any = field(default=None, repr=False, compare=False)


@dataclass
class Transcript:
    messages: list[Message] = field(default_factory=list)
    aggregator_draws: int = 0

    def send(self, sender: str, receiver: str, kind: str, scalars: int, payload=None) -> Message:
        msg = Message(len(self.messages), sender, receiver, kind, int(scalars), payload)
        self.messages.append(msg)
        return msg

    def involving(self, role: str) -> list[Message]:
        """Messages sent or received by ``role``; a client receives the broadcast."""
        out = []
        for msg in self.messages:
            to_me = msg.receiver == role or (msg.receiver == ALL_CLIENTS and role.startswith("client:"))
            if msg.sender == role or to_me:
                out.append(msg)
        return out

    def scalars_sent(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for msg in self.messages:
            totals[msg.sender] = totals.get(msg.sender, 0) + msg.scalars
        return totals

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seq", "from", "to", "kind", "scalars"])
            for msg in self.messages:
                w.writerow([msg.seq, msg.sender, msg.receiver, msg.kind, msg.scalars])


class ClientData(NamedTuple):
    """Examples held by one user: item ids and labels."""

    items: np.ndarray
    labels: np.ndarray


def split_by_user(ds: InteractionDataset) -> list[ClientData]:
    """One :class:`ClientData` per user id ``0..n-1`` (possibly empty), in input order."""
    out = []
    for k in range(ds.n):
        mask = ds.users == k
        out.append(ClientData(ds.items[mask].copy(), ds.labels[mask].copy()))
    return out


def dataset_from_clients(clients: Sequence[ClientData], m: int) -> InteractionDataset:
    """Concatenate client data in client order (the order the aggregator sees)."""
    users = np.concatenate([np.full(len(c.items), k, dtype=np.int64) for k, c in enumerate(clients)] or [[]])
    items = np.concatenate([np.asarray(c.items, dtype=np.int64) for c in clients] or [[]])
    labels = np.concatenate([np.asarray(c.labels, dtype=np.float64) for c in clients] or [[]])
    return InteractionDataset(users, items, labels, n=len(clients), m=m)


def example_weights(ds: InteractionDataset, wbar: float, counts: np.ndarray | None = None) -> np.ndarray:
    """Per-user normalized weights, or budget weights when public item counts are given."""
    return per_user_normalized_weights(ds, wbar) if counts is None else budget_weights(ds, counts, wbar)


@dataclass
class FederatedResult:
    enc: PublicEncoder
    transcript: Transcript
    trace: TrainTrace
    sigma: float


def run_federated_ssp2(
    X: PublicFeatureMatrix, clients: Sequence[ClientData], user_params: UserEncoder, enc: PublicEncoder,
    cfg: TrainConfig, budget: PrivacySpec, noise: NoiseSource, counts: np.ndarray | None = None,
    sigma: float | None = None,
) -> FederatedResult:
    """Run the protocol once and return the server's final encoder with the transcript.

    ``sigma`` overrides the calibrated noise multiplier (diagnostics only).
    """
    if budget.unit != "user" or budget.variant != "ssp2":
        raise ValueError("federated SSP2 needs a user-level ssp2 PrivacySpec")
    if user_params.n != len(clients):
        raise ValueError("one user row per client required")
    sigma = calibrate_sigma(budget) if sigma is None else sigma
    tr = Transcript()

    # distributor
    broadcast = tr.send(DISTRIBUTOR, ALL_CLIENTS, "params", user_params.table.size, user_params.table.copy())

    # clients, in index order
    for k, data in enumerate(clients):
        u_k = UserEncoder(broadcast.payload).user_embed(k)
        payload = (u_k, np.asarray(data.items, dtype=np.int64), np.asarray(data.labels, dtype=np.float64))
        tr.send(client_role(k), AGGREGATOR, "upload", len(u_k) + 2 * len(data.items), payload)

    # aggregator
    uploads = [msg.payload for msg in tr.messages if msg.kind == "upload"]
    table = np.stack([u for u, _, _ in uploads]) if uploads else np.zeros((0, user_params.d))
    ds = dataset_from_clients([ClientData(it, lb) for _, it, lb in uploads], X.m)
    ds = ds.with_weights(example_weights(ds, budget.wbar, counts))
    before = noise.draws
    released = noise_stats(compute_stats(ds, table, cfg.clip_u, cfg.clip_y, m=X.m),
                           sigma, cfg.clip_u, cfg.clip_y, noise, ("stats", 0))
    tr.aggregator_draws = noise.draws - before
    tr.send(AGGREGATOR, SERVER, "stats", released.num_scalars, released)

    # server sees public features plus the released statistics
    stats_msgs = [msg for msg in tr.messages if msg.receiver == SERVER and msg.kind == "stats"]
    final, trace = ssp2_minibatch_from_stats(enc, X, stats_msgs[0].payload, cfg, noise)
    return FederatedResult(final, tr, trace, sigma)


def monolithic_reference(
    X: PublicFeatureMatrix, clients: Sequence[ClientData], user_params: UserEncoder, enc: PublicEncoder,
    cfg: TrainConfig, budget: PrivacySpec, noise: NoiseSource, counts: np.ndarray | None = None,
    sigma: float | None = None,
):
    """The same computation as one in-process mini-batch SSP2 call."""
    ds = dataset_from_clients(clients, X.m)
    ds = ds.with_weights(example_weights(ds, budget.wbar, counts))
    sigma = calibrate_sigma(budget) if sigma is None else sigma
    return ssp2_minibatch(enc, ds, X, user_params, cfg, sigma, noise)


# ---------------------------------------------------------------------------
# Audits


@dataclass
class AuditReport:
    violations: list[tuple[Message | None, str]]

    @property
    def passed(self) -> bool:
        return not self.violations

    def raise_if_failed(self) -> None:
        if self.violations:
            lines = [f"seq={m.seq if m else '-'}: {why}" for m, why in self.violations]
            raise AssertionError("audit failed:\n" + "\n".join(lines))


def audit_server_view(transcript: Transcript) -> AuditReport:
    """Check that the server received nothing but released statistics from the aggregator."""
    bad = []
    for msg in transcript.messages:
        if msg.receiver != SERVER:
            continue
        if msg.kind != "stats" or msg.sender != AGGREGATOR:
            bad.append((msg, f"server received {msg.kind!r} from {msg.sender}"))
        elif not isinstance(msg.payload, SuffStats):
            bad.append((msg, "stats payload is not a statistics object"))
    return AuditReport(bad)


def check_transcript(transcript: Transcript, num_clients: int, m: int, d: int) -> AuditReport:
    """Structural protocol checks on message edges and payload sizes."""
    bad = []
    kinds = [msg.kind for msg in transcript.messages]
    if kinds.count("params") != 1:
        bad.append((None, f"expected 1 broadcast, saw {kinds.count('params')}"))
    if kinds.count("stats") != 1:
        bad.append((None, f"expected 1 stats transfer, saw {kinds.count('stats')}"))
    for msg in transcript.messages:
        edge = LEGAL_EDGES.get(msg.kind)
        if edge is None or (_role_kind(msg.sender), _role_kind(msg.receiver)) != edge:
            bad.append((msg, f"illegal {msg.kind!r} edge {msg.sender} -> {msg.receiver}"))
        if msg.kind == "upload":
            u, items, _ = msg.payload
            if msg.scalars != d + 2 * len(items) or len(u) != d:
                bad.append((msg, "upload size mismatch"))
        if msg.kind == "stats" and msg.scalars != m * (d * d + d):
            bad.append((msg, "stats payload size mismatch"))
    for k in range(num_clients):
        seen = transcript.involving(client_role(k))
        if len(seen) != 2:
            bad.append((None, f"client {k} appears in {len(seen)} messages"))
    return AuditReport(bad)
