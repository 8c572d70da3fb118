"""Client update loops and server aggregation for the federated round.

One round: the server publishes its global variational parameters (or a
bank of per-cluster parameters), each sampled participant runs a fixed
number of alternating SGD steps on its personal and localized-global
parameters, and the server combines the returned localized-global tuples
with an extrapolated average. Personal parameters never leave the client;
only localized-global tuples (and selected cluster ids) cross the wire.

Determinism: every client owns a private counter-based RNG stream keyed by
(global_seed, namespace, client_id, round). Cluster selection draws from a
separate namespace so that running the clustered algorithm with a single
cluster consumes exactly the same update-stream draws as the flat
algorithm, making the two trajectories bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .bnn import (
    Batch,
    NetworkShape,
    backprop_theta,
    d_log_likelihood,
    forward,
    grad_objective,
    log_likelihood,
)
from .data import LabeledDataset
from .errors import ConfigurationError, ProtocolError
from .variational import (
    NoiseDraw,
    SparseVariationalParams,
    VariationalParams,
    clamp_lambda,
    sample_gaussian,
)

KINDS = ("pfedbayes", "sfedbayes")


@dataclass(frozen=True)
class LocalSpec:
    """Everything a client needs to run its local steps.

    steps is the number of alternating local iterations per round;
    lr_personal and lr_global are the two SGD rates; lr_point is the rate
    for the deterministic-weight baseline.
    """

    shape: NetworkShape
    steps: int = 20
    batch_size: int = 50
    mc_samples: int = 1
    lr_personal: float = 0.001
    lr_global: float = 0.001
    lr_point: float = 0.01
    zeta: float = 10.0
    tau: float = 0.5
    global_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mc_samples < 1:
            raise ConfigurationError(f"mc_samples must be >= 1, got {self.mc_samples}")
        for name in ("lr_personal", "lr_global", "lr_point"):
            if getattr(self, name) < 0.0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.zeta < 1.0:
            raise ConfigurationError(f"zeta must be >= 1, got {self.zeta}")
        if self.tau <= 0.0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.global_seed < 0:
            raise ConfigurationError(f"global_seed must be >= 0, got {self.global_seed}")


@dataclass(frozen=True)
class ClientState:
    """One client's private state between rounds.

    personal and localized_global are variational parameter tuples of the
    same kind (or plain weight vectors for the deterministic baseline);
    cluster_id records the most recent cluster selection, if any.
    """

    id: int
    personal: object
    localized_global: object
    train_data: LabeledDataset
    cluster_id: int | None = None

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"client id must be >= 0, got {self.id}")
        if self.train_data.size < 1:
            raise ValueError("client needs at least one training sample")

    @property
    def n(self) -> int:
        return self.train_data.size


@dataclass(frozen=True)
class ServerState:
    """Server-held parameters: a bank of K entries (K=1 for flat runs)."""

    bank: tuple
    round: int = 0

    def __post_init__(self):
        bank = tuple(self.bank)
        if not bank:
            raise ValueError("server bank must hold at least one entry")
        object.__setattr__(self, "bank", bank)
        if self.round < 0:
            raise ValueError(f"round must be >= 0, got {self.round}")

    @property
    def num_clusters(self) -> int:
        return len(self.bank)

    @property
    def global_params(self):
        if len(self.bank) != 1:
            raise ValueError("global_params is defined only for a single-entry bank")
        return self.bank[0]


@dataclass(frozen=True)
class RoundPlan:
    """The participant set for one round."""

    participants: tuple
    rng_seed: int

    def __post_init__(self):
        parts = tuple(int(p) for p in self.participants)
        if len(set(parts)) != len(parts):
            raise ValueError("participants must be distinct")
        object.__setattr__(self, "participants", parts)


def sample_participants(N: int, S: int, round_index: int, seed: int) -> RoundPlan:
    """Uniformly sample S of N clients without replacement for one round."""
    if not 1 <= S <= N:
        raise ConfigurationError(f"need 1 <= S <= N, got S={S}, N={N}")
    gen = rng.stream(seed, rng.PLAN, round_index)
    picked = sorted(int(i) for i in gen.choice(N, size=S, replace=False))
    return RoundPlan(participants=tuple(picked), rng_seed=seed)


def _draw_minibatch(gen, data: LabeledDataset, b: int) -> Batch:
    idx = gen.choice(data.size, size=b, replace=False)
    return Batch(data.inputs[idx], data.labels[idx])


def _draw_noise(gen, size: int, a: int, with_u: bool) -> list[NoiseDraw]:
    draws = []
    for _ in range(a):
        g = gen.standard_normal(size)
        u = np.clip(gen.random(size), 1e-12, 1.0 - 1e-12) if with_u else None
        draws.append(NoiseDraw(g, u))
    return draws


def _sgd_step(params, grad, lr: float):
    if isinstance(params, SparseVariationalParams):
        base = VariationalParams(
            params.mu - lr * grad.d_mu, params.rho - lr * grad.d_rho
        )
        return SparseVariationalParams(base, clamp_lambda(params.lam - lr * grad.d_lambda))
    return VariationalParams(params.mu - lr * grad.d_mu, params.rho - lr * grad.d_rho)


def client_update(
    kind: str,
    state: ClientState,
    global_params,
    spec: LocalSpec,
    round_index: int,
):
    """Run one client's local steps and return its upload.

    The localized-global tuple starts from the downloaded global; each step
    first moves the personal parameters along the full objective gradient,
    then moves the localized-global parameters along the KL gradient using
    the just-updated personal parameters. Returns (upload, updated state);
    the upload is the final localized-global tuple, never the personal one.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown algorithm kind: {kind!r}")
    if spec.batch_size > state.n:
        raise ConfigurationError(
            f"batch_size {spec.batch_size} exceeds client {state.id} data size {state.n}"
        )
    sparse = kind == "sfedbayes"
    gen = rng.stream(spec.global_seed, rng.UPDATE, state.id, round_index)
    personal = state.personal
    w_local = global_params
    n = state.n
    for _ in range(spec.steps):
        batch = _draw_minibatch(gen, state.train_data, spec.batch_size)
        noise = _draw_noise(gen, personal.size, spec.mc_samples, with_u=sparse)
        g_pers = grad_objective(
            kind, "personal", spec.shape, personal, w_local, batch,
            n, spec.mc_samples, spec.zeta, spec.tau, noise,
        )
        personal = _sgd_step(personal, g_pers, spec.lr_personal)
        g_glob = grad_objective(
            kind, "localized_global", spec.shape, personal, w_local, batch,
            n, spec.mc_samples, spec.zeta, spec.tau, noise,
        )
        w_local = _sgd_step(w_local, g_glob, spec.lr_global)
    return w_local, replace(state, personal=personal, localized_global=w_local)


def select_cluster(
    state: ClientState, bank, spec: LocalSpec, round_index: int
) -> int:
    """Pick the bank entry whose sampled weights explain the client's data best.

    Scores each candidate by the scaled Monte Carlo log-likelihood on one
    minibatch, reusing the same noise draws for every candidate so the
    argmax is a paired comparison; ties resolve to the lowest index.
    """
    if not bank:
        raise ValueError("bank must hold at least one entry")
    if spec.batch_size > state.n:
        raise ConfigurationError(
            f"batch_size {spec.batch_size} exceeds client {state.id} data size {state.n}"
        )
    gen = rng.stream(spec.global_seed, rng.SELECT, state.id, round_index)
    batch = _draw_minibatch(gen, state.train_data, spec.batch_size)
    noise = _draw_noise(gen, bank[0].size, spec.mc_samples, with_u=False)
    scale = (state.n / spec.batch_size) / spec.mc_samples
    scores = np.empty(len(bank))
    for k, cand in enumerate(bank):
        total = 0.0
        for draw in noise:
            theta = sample_gaussian(cand, draw)
            total += log_likelihood(spec.shape, forward(spec.shape, theta, batch.inputs), batch)
        scores[k] = scale * total
    return int(np.argmax(scores))


def client_update_cfedbayes(
    state: ClientState, bank, spec: LocalSpec, round_index: int
):
    """Clustered client step: select a cluster, then update against its entry.

    Returns (cluster_id, upload, updated state). With a single-entry bank
    this reduces to client_update on that entry, draw for draw.
    """
    k = select_cluster(state, bank, spec, round_index)
    upload, new_state = client_update("pfedbayes", state, bank[k], spec, round_index)
    return k, upload, replace(new_state, cluster_id=k)


def _combine(old, mean, beta: float):
    if isinstance(old, SparseVariationalParams):
        base = VariationalParams(
            (1.0 - beta) * old.mu + beta * mean.mu,
            (1.0 - beta) * old.rho + beta * mean.rho,
        )
        return SparseVariationalParams(
            base, clamp_lambda((1.0 - beta) * old.lam + beta * mean.lam)
        )
    if isinstance(old, VariationalParams):
        return VariationalParams(
            (1.0 - beta) * old.mu + beta * mean.mu,
            (1.0 - beta) * old.rho + beta * mean.rho,
        )
    return (1.0 - beta) * old + beta * mean


def _mean_params(uploads):
    first = uploads[0]
    if isinstance(first, SparseVariationalParams):
        base = VariationalParams(
            np.mean([u.mu for u in uploads], axis=0),
            np.mean([u.rho for u in uploads], axis=0),
        )
        return SparseVariationalParams(base, np.mean([u.lam for u in uploads], axis=0))
    if isinstance(first, VariationalParams):
        return VariationalParams(
            np.mean([u.mu for u in uploads], axis=0),
            np.mean([u.rho for u in uploads], axis=0),
        )
    return np.mean(np.stack(uploads), axis=0)


def aggregate(
    server: ServerState, uploads: list, plan: RoundPlan, beta: float
) -> ServerState:
    """Combine uploads into the single global entry.

    new = (1 - beta) * old + beta * mean(uploads), coordinate-wise on the
    raw parameter tuples. beta in (0, 1] interpolates; beta > 1 is permitted
    as an extrapolation step.
    """
    if beta <= 0.0:
        raise ConfigurationError(f"beta must be positive, got {beta}")
    if len(uploads) != len(plan.participants):
        raise ProtocolError(
            f"got {len(uploads)} uploads for {len(plan.participants)} participants"
        )
    new_global = _combine(server.global_params, _mean_params(uploads), beta)
    return ServerState(bank=(new_global,), round=server.round + 1)


def aggregate_clusters(
    server: ServerState, uploads: list, beta: float
) -> ServerState:
    """Combine (cluster_id, params) uploads into the bank, per cluster.

    Clusters that received no uploads keep their previous entry unchanged.
    """
    if beta <= 0.0:
        raise ConfigurationError(f"beta must be positive, got {beta}")
    groups: dict[int, list] = {}
    for cid, params in uploads:
        cid = int(cid)
        if not 0 <= cid < server.num_clusters:
            raise ProtocolError(
                f"upload tagged with unknown cluster id {cid} (K={server.num_clusters})"
            )
        groups.setdefault(cid, []).append(params)
    bank = list(server.bank)
    for cid, members in groups.items():
        bank[cid] = _combine(bank[cid], _mean_params(members), beta)
    return ServerState(bank=tuple(bank), round=server.round + 1)


def fedavg_update(
    state: ClientState, global_weights: np.ndarray, spec: LocalSpec, round_index: int
):
    """Deterministic-weight baseline: local SGD on the mean minibatch loss.

    Local weights start from the download each round; the client keeps no
    personal model. Returns (weights, updated state).
    """
    if spec.batch_size > state.n:
        raise ConfigurationError(
            f"batch_size {spec.batch_size} exceeds client {state.id} data size {state.n}"
        )
    gen = rng.stream(spec.global_seed, rng.UPDATE, state.id, round_index)
    theta = np.asarray(global_weights, dtype=np.float64).copy()
    for _ in range(spec.steps):
        batch = _draw_minibatch(gen, state.train_data, spec.batch_size)
        outputs = forward(spec.shape, theta, batch.inputs)
        d_out = -d_log_likelihood(spec.shape, outputs, batch) / batch.size
        grad = backprop_theta(spec.shape, theta, batch.inputs, d_out)
        theta = theta - spec.lr_point * grad
    return theta, replace(state, localized_global=theta)


def fedavg_aggregate(
    server: ServerState, uploads: list, plan: RoundPlan, beta: float
) -> ServerState:
    """Average raw weight vectors with the same extrapolated-mean rule."""
    return aggregate(server, uploads, plan, beta)


def sparsity_mask(params: SparseVariationalParams, tol: float):
    """Which coordinates survive the transmission threshold.

    Coordinates with inclusion probability below tol are dropped from the
    upload; the receiver fills them from its previous values. Returns
    (kept_count, boolean keep mask).
    """
    if not 0.0 <= tol < 1.0:
        raise ConfigurationError(f"tol must lie in [0, 1), got {tol}")
    mask = params.lam >= tol
    return int(mask.sum()), mask


def apply_sparsity(
    previous: SparseVariationalParams,
    upload: SparseVariationalParams,
    mask: np.ndarray,
) -> SparseVariationalParams:
    """Receiver-side merge: masked-out coordinates keep their previous values."""
    mask = np.asarray(mask, dtype=bool)
    base = VariationalParams(
        np.where(mask, upload.mu, previous.mu),
        np.where(mask, upload.rho, previous.rho),
    )
    return SparseVariationalParams(base, np.where(mask, upload.lam, previous.lam))
