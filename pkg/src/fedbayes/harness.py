"""Experiment driver: config parsing, federation assembly, the round loop,
metric emission, and the built-in verification suites.

A run directory contains exactly four core artifacts: the effective config
(defaults plus overrides, re-runnable), a metrics CSV with a fixed column
schema, the final parameter state, and a JSON summary with the
trailing-window scores. Optional snapshot files capture per-client
posteriors at requested rounds for uncertainty analysis.

Timing is recorded in summary.json only; the wall_time_s CSV column is
emitted empty so that two runs with equal seeds produce byte-identical
metric files.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import rng
from .bnn import (
    Batch,
    NetworkShape,
    finite_diff_grad,
    forward,
    grad_objective,
    init_point,
    init_sparse,
    init_variational,
    log_likelihood,
    objective_pfedbayes,
    objective_sfedbayes,
    predictive,
)
from .data import (
    PRESETS,
    SYNTH_INPUT_DIM,
    LabeledDataset,
    load_idx,
    make_cluster_dataset,
    partition_noniid,
    PartitionSpec,
    synthetic_regression,
)
from .errors import ConfigurationError, UsageError
from .fed_protocol import (
    ClientState,
    LocalSpec,
    ServerState,
    aggregate,
    aggregate_clusters,
    apply_sparsity,
    client_update,
    client_update_cfedbayes,
    fedavg_aggregate,
    fedavg_update,
    sample_participants,
    sparsity_mask,
)
from .variational import (
    NoiseDraw,
    SparseVariationalParams,
    VariationalParams,
    kl_bernoulli_gaussian_upper,
    kl_gaussian,
    mc_kl_estimate,
    optimal_global,
)

ALGORITHMS = ("pfedbayes", "sfedbayes", "cfedbayes", "fedavg")
DATASETS = ("mnist", "mnist_clusters", "synthetic")

METRICS_HEADER = (
    "round,client_id,pm_acc,gm_acc,train_loss,sparsity,cluster_id,wall_time_s"
)
UNCERTAINTY_HEADER = "round,client_id,mean_entropy"

DATA_DIR_ENV = "FEDBAYES_DATA_DIR"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _default_data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "data")


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, fully-serializable description of one run.

    Every field has a default except out_dir handling: when out_dir is empty
    a deterministic name under runs/ is derived from the other fields.
    """

    algorithm: str = "pfedbayes"
    dataset: str = "mnist"
    data_dir: str = ""
    preset: str = "small"
    num_clients: int = 10
    labels_per_client: int = 5
    layer_widths: tuple = (784, 100, 10)
    noise_sigma: float = 1.0
    rounds: int = 800
    local_steps: int = 20
    batch_size: int = 50
    mc_samples: int = 1
    lr_personal: float = 0.001
    lr_global: float = 0.001
    lr_point: float = 0.01
    beta: float = 1.0
    zeta: float = 10.0
    tau: float = 0.5
    lambda_init: float = 0.5
    rho_init: float = -2.5
    tol: float = 0.0
    num_clusters: int = 1
    participants: int = 10
    global_seed: int = 0
    out_dir: str = ""
    snapshot_rounds: tuple = ()
    synth_clients_per_cluster: int = 4
    synth_n_train: int = 200
    synth_n_test: int = 200
    synth_noise_sigma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(
            self, "snapshot_rounds", tuple(int(r) for r in self.snapshot_rounds)
        )
        if not self.data_dir:
            object.__setattr__(self, "data_dir", _default_data_dir())
        object.__setattr__(self, "data_dir", os.path.abspath(self.data_dir))
        if not self.out_dir:
            object.__setattr__(
                self,
                "out_dir",
                os.path.join(
                    "runs",
                    f"{self.algorithm}_{self.dataset}_{self.preset}_s{self.global_seed}",
                ),
            )
        object.__setattr__(self, "out_dir", os.path.abspath(self.out_dir))
        self._validate()

    def _validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm: {self.algorithm!r}")
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"unknown dataset: {self.dataset!r}")
        if self.dataset != "synthetic" and self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset: {self.preset!r}")
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_steps < 1:
            raise ConfigurationError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mc_samples < 1:
            raise ConfigurationError(f"mc_samples must be >= 1, got {self.mc_samples}")
        for name in ("lr_personal", "lr_global", "lr_point"):
            if getattr(self, name) < 0.0:
                raise ConfigurationError(
                    f"{name} must be >= 0, got {getattr(self, name)}"
                )
        if self.beta <= 0.0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if self.zeta < 1.0:
            raise ConfigurationError(f"zeta must be >= 1, got {self.zeta}")
        if self.tau <= 0.0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.lambda_init < 1.0:
            raise ConfigurationError(
                f"lambda_init must lie in (0, 1), got {self.lambda_init}"
            )
        if not 0.0 <= self.tol < 1.0:
            raise ConfigurationError(f"tol must lie in [0, 1), got {self.tol}")
        if self.num_clusters < 1:
            raise ConfigurationError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if self.num_clients < 1:
            raise ConfigurationError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 1 <= self.participants <= self.num_clients:
            raise ConfigurationError(
                f"participants must lie in [1, {self.num_clients}], got {self.participants}"
            )
        if self.global_seed < 0:
            raise ConfigurationError(f"global_seed must be >= 0, got {self.global_seed}")
        if self.noise_sigma <= 0.0:
            raise ConfigurationError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if len(self.layer_widths) < 3 or any(w < 1 for w in self.layer_widths):
            raise ConfigurationError(f"bad layer_widths: {self.layer_widths}")
        for r in self.snapshot_rounds:
            if r < 0 or r > self.rounds:
                raise ConfigurationError(
                    f"snapshot round {r} outside [0, rounds={self.rounds}]"
                )
        if self.dataset == "synthetic":
            if self.synth_n_train < 1 or self.synth_n_test < 1:
                raise ConfigurationError("synthetic split sizes must be >= 1")
            if self.synth_clients_per_cluster < 1:
                raise ConfigurationError("synth_clients_per_cluster must be >= 1")
            if self.synth_noise_sigma < 0.0:
                raise ConfigurationError("synth_noise_sigma must be >= 0")
            expect = self.num_clusters * self.synth_clients_per_cluster
            if self.num_clients != expect:
                raise ConfigurationError(
                    f"num_clients {self.num_clients} != num_clusters *"
                    f" synth_clients_per_cluster = {expect}"
                )
            if self.layer_widths[0] != SYNTH_INPUT_DIM or self.layer_widths[-1] != 1:
                raise ConfigurationError(
                    f"synthetic runs need layer_widths ({SYNTH_INPUT_DIM}, ..., 1),"
                    f" got {self.layer_widths}"
                )
        else:
            if self.layer_widths[0] != 784 or self.layer_widths[-1] != 10:
                raise ConfigurationError(
                    f"image runs need layer_widths (784, ..., 10), got {self.layer_widths}"
                )
            if not 1 <= self.labels_per_client <= 10:
                raise ConfigurationError(
                    f"labels_per_client must lie in [1, 10], got {self.labels_per_client}"
                )
        if self.batch_size > self.train_size_per_client:
            raise ConfigurationError(
                f"batch_size {self.batch_size} exceeds per-client training size"
                f" {self.train_size_per_client}"
            )

    @property
    def task(self) -> str:
        return "regression" if self.dataset == "synthetic" else "classification"

    @property
    def train_size_per_client(self) -> int:
        if self.dataset == "synthetic":
            return self.synth_n_train
        return self.labels_per_client * PRESETS[self.preset][0]

    @property
    def shape(self) -> NetworkShape:
        return NetworkShape(
            layer_widths=self.layer_widths,
            task=self.task,
            noise_sigma=self.noise_sigma,
        )

    @property
    def local_spec(self) -> LocalSpec:
        return LocalSpec(
            shape=self.shape,
            steps=self.local_steps,
            batch_size=self.batch_size,
            mc_samples=self.mc_samples,
            lr_personal=self.lr_personal,
            lr_global=self.lr_global,
            lr_point=self.lr_point,
            zeta=self.zeta,
            tau=self.tau,
            global_seed=self.global_seed,
        )


_CONFIG_FIELDS = None


def config_field_names() -> frozenset:
    global _CONFIG_FIELDS
    if _CONFIG_FIELDS is None:
        _CONFIG_FIELDS = frozenset(f.name for f in fields(ExperimentConfig))
    return _CONFIG_FIELDS


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from parsed key-value pairs; unknown keys are usage errors."""
    unknown = set(raw) - config_field_names()
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return ExperimentConfig(**raw)


def load_config(path) -> ExperimentConfig:
    """Read a TOML config file into an ExperimentConfig."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return config_from_dict(raw)


def parse_override(text: str) -> tuple[str, object]:
    """Parse one --key=value override; the value uses TOML scalar syntax,
    falling back to a bare string."""
    if "=" not in text:
        raise UsageError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if key not in config_field_names():
        raise UsageError(f"unknown config key: {key!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key, parsed


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    updates = dict(parse_override(o) for o in overrides)
    return replace(config, **updates) if updates else config


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


def config_to_toml(config: ExperimentConfig) -> str:
    lines = [
        f"{f.name} = {_toml_scalar(getattr(config, f.name))}"
        for f in fields(ExperimentConfig)
    ]
    return "\n".join(lines) + "\n"


def _mnist_path(data_dir: str, stem: str) -> Path:
    root = Path(data_dir) / "mnist"
    for candidate in (root / f"{stem}.gz", root / stem):
        if candidate.exists():
            return candidate
    raise ConfigurationError(
        f"dataset file {stem}[.gz] not found under {root}; set {DATA_DIR_ENV}"
        " or the data_dir config key"
    )


def _load_mnist_pool(data_dir: str) -> LabeledDataset:
    train = load_idx(
        _mnist_path(data_dir, MNIST_FILES["train_images"]),
        _mnist_path(data_dir, MNIST_FILES["train_labels"]),
    )
    test = load_idx(
        _mnist_path(data_dir, MNIST_FILES["test_images"]),
        _mnist_path(data_dir, MNIST_FILES["test_labels"]),
    )
    return LabeledDataset(
        np.concatenate([train.inputs, test.inputs]),
        np.concatenate([train.labels, test.labels]),
        "mnist-pool",
    )


@dataclass(frozen=True)
class Federation:
    """Everything run_experiment needs: clients, their test splits, the
    initialized server, and optional ground-truth cluster ids."""

    clients: list
    test_sets: list
    server: ServerState
    ground_truth: list | None


def _init_bank(config: ExperimentConfig, k: int):
    shape = config.shape
    gen = rng.stream(config.global_seed, rng.INIT_GLOBAL, k)
    if config.algorithm == "sfedbayes":
        return init_sparse(shape, config.rho_init, config.lambda_init, gen)
    if config.algorithm == "fedavg":
        return init_point(shape, gen)
    return init_variational(shape, config.rho_init, gen)


def _init_personal(config: ExperimentConfig, client_id: int):
    if config.algorithm == "fedavg":
        return None
    shape = config.shape
    gen = rng.stream(config.global_seed, rng.INIT_PERSONAL, client_id)
    if config.algorithm == "sfedbayes":
        return init_sparse(shape, config.rho_init, config.lambda_init, gen)
    return init_variational(shape, config.rho_init, gen)


def build_federation(config: ExperimentConfig) -> Federation:
    """Load data, partition it, and initialize client and server states."""
    if config.dataset == "synthetic":
        total = config.synth_n_train + config.synth_n_test
        datasets, ids = synthetic_regression(
            config.num_clusters,
            config.synth_clients_per_cluster,
            total,
            config.synth_noise_sigma,
            config.global_seed,
        )
        pairs = []
        for ds in datasets:
            tr = np.arange(config.synth_n_train)
            te = np.arange(config.synth_n_train, total)
            pairs.append((ds.subset(tr, f"{ds.name}/train"), ds.subset(te, f"{ds.name}/test")))
        ground_truth = list(ids)
    else:
        pool = _load_mnist_pool(config.data_dir)
        train_pc, test_pc = PRESETS[config.preset]
        spec = PartitionSpec(
            num_clients=config.num_clients,
            labels_per_client=config.labels_per_client,
            train_per_class=train_pc,
            test_per_class=test_pc,
            seed=config.global_seed,
        )
        pairs = partition_noniid(pool, spec)
        ground_truth = None
        if config.dataset == "mnist_clusters":
            half = config.num_clients // 2
            ground_truth = [0 if i < half else 1 for i in range(config.num_clients)]
            pairs = [
                (
                    make_cluster_dataset(tr, "identity" if i < half else "inverted"),
                    make_cluster_dataset(te, "identity" if i < half else "inverted"),
                )
                for i, (tr, te) in enumerate(pairs)
            ]
    bank_size = config.num_clusters if config.algorithm == "cfedbayes" else 1
    server = ServerState(
        bank=tuple(_init_bank(config, k) for k in range(bank_size)), round=0
    )
    clients = []
    test_sets = []
    for i, (train, test) in enumerate(pairs):
        clients.append(
            ClientState(
                id=i,
                personal=_init_personal(config, i),
                localized_global=None,
                train_data=train,
                cluster_id=None,
            )
        )
        test_sets.append(test)
    return Federation(clients=clients, test_sets=test_sets, server=server, ground_truth=ground_truth)


def mean_weights(params) -> np.ndarray:
    """Deterministic weights of a posterior: the mean, hard-masked by the
    inclusion probabilities in the sparse case."""
    if isinstance(params, SparseVariationalParams):
        return params.mu * (params.lam > 0.5)
    if isinstance(params, VariationalParams):
        return params.mu
    return np.asarray(params, dtype=np.float64)


def evaluate(
    params,
    shape: NetworkShape,
    test: LabeledDataset,
    mode: str = "mean_weights",
    n_samples: int = 64,
    seed: int = 0,
) -> float:
    """Classification accuracy of a parameter tuple on one test split.

    mean_weights scores the deterministic mean network; sampled averages
    softmax outputs over n_samples posterior draws before the argmax. Ties
    resolve to the lowest class index.
    """
    if shape.task != "classification":
        raise ConfigurationError("evaluate requires a classification task")
    if test.size == 0:
        raise ConfigurationError("empty test set")
    if mode == "mean_weights":
        logits = forward(shape, mean_weights(params), test.inputs)
        pred = np.argmax(logits, axis=1)
    elif mode == "sampled":
        probs, _ = predictive(params, shape, test.inputs, n_samples, seed)
        pred = np.argmax(probs, axis=1)
    else:
        raise ConfigurationError(f"unknown evaluation mode: {mode!r}")
    return float(np.mean(pred == test.labels))


def _train_loss(params, shape: NetworkShape, train: LabeledDataset) -> float:
    """Per-sample negative log-likelihood of the mean network on a train split."""
    batch = Batch(train.inputs, train.labels)
    outputs = forward(shape, mean_weights(params), train.inputs)
    return float(-log_likelihood(shape, outputs, batch) / train.size)


def final_score(values) -> tuple[float, int, int]:
    """Max of a per-round series over the trailing window.

    Window is 100 rounds when the series has at least 400 entries, else the
    last quarter (at least one). Returns (score, 1-based round of max,
    window length); a pure function of the series.
    """
    vals = [float(v) for v in values]
    T = len(vals)
    if T == 0:
        raise ValueError("final_score needs a non-empty series")
    window = 100 if T >= 400 else max(1, T // 4)
    tail = vals[-window:]
    best = max(tail)
    round_of_max = T - window + tail.index(best) + 1
    return best, round_of_max, window


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass(frozen=True)
class RunResult:
    run_dir: Path
    summary: dict
    config: ExperimentConfig


def _snapshot_path(run_dir: Path, round_index: int) -> Path:
    return run_dir / "snapshots" / f"round{round_index:04d}.npz"


def _save_snapshot(run_dir: Path, round_index: int, clients) -> None:
    arrays = {}
    for state in clients:
        p = state.personal
        if p is None:
            continue
        arrays[f"client{state.id}_mu"] = p.mu
        arrays[f"client{state.id}_rho"] = p.rho
        if isinstance(p, SparseVariationalParams):
            arrays[f"client{state.id}_lam"] = p.lam
    path = _snapshot_path(run_dir, round_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_snapshot(run_dir: Path, round_index: int, num_clients: int, sparse: bool):
    with np.load(_snapshot_path(run_dir, round_index)) as data:
        out = []
        for i in range(num_clients):
            base = VariationalParams(data[f"client{i}_mu"], data[f"client{i}_rho"])
            if sparse:
                out.append(SparseVariationalParams(base, data[f"client{i}_lam"]))
            else:
                out.append(base)
    return out


def _save_final_state(path: Path, server: ServerState, clients) -> None:
    arrays = {"round": np.array(server.round)}
    for k, entry in enumerate(server.bank):
        if isinstance(entry, (VariationalParams, SparseVariationalParams)):
            arrays[f"bank{k}_mu"] = entry.mu
            arrays[f"bank{k}_rho"] = entry.rho
            if isinstance(entry, SparseVariationalParams):
                arrays[f"bank{k}_lam"] = entry.lam
        else:
            arrays[f"bank{k}_theta"] = np.asarray(entry)
    cluster_ids = []
    for state in clients:
        cluster_ids.append(-1 if state.cluster_id is None else state.cluster_id)
        p = state.personal
        if p is None:
            continue
        arrays[f"client{state.id}_mu"] = p.mu
        arrays[f"client{state.id}_rho"] = p.rho
        if isinstance(p, SparseVariationalParams):
            arrays[f"client{state.id}_lam"] = p.lam
    arrays["cluster_ids"] = np.array(cluster_ids, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Execute the configured federation for the configured number of rounds.

    Per round: sample participants, run their local updates, aggregate, then
    evaluate every client. The metrics file gets one row per client per
    round plus one across-client mean row with an empty client_id.
    """
    fed = build_federation(config)
    clients = list(fed.clients)
    server = fed.server
    spec = config.local_spec
    shape = config.shape
    sparse = config.algorithm == "sfedbayes"
    classify = shape.task == "classification"

    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.effective.toml").write_text(config_to_toml(config))

    if 0 in config.snapshot_rounds:
        _save_snapshot(run_dir, 0, clients)

    pm_mean_series: list[float] = []
    gm_mean_series: list[float] = []
    round_times: list[float] = []
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRICS_HEADER.split(","))

    for t in range(config.rounds):
        tic = time.perf_counter()
        plan = sample_participants(
            config.num_clients, config.participants, t, config.global_seed
        )
        if config.algorithm == "cfedbayes":
            uploads = []
            for cid in plan.participants:
                k, upload, clients[cid] = client_update_cfedbayes(
                    clients[cid], server.bank, spec, t
                )
                uploads.append((k, upload))
            server = aggregate_clusters(server, uploads, config.beta)
        elif config.algorithm == "fedavg":
            uploads = []
            for cid in plan.participants:
                upload, clients[cid] = fedavg_update(
                    clients[cid], server.global_params, spec, t
                )
                uploads.append(upload)
            server = fedavg_aggregate(server, uploads, plan, config.beta)
        else:
            uploads = []
            for cid in plan.participants:
                upload, clients[cid] = client_update(
                    config.algorithm, clients[cid], server.global_params, spec, t
                )
                if sparse and config.tol > 0.0:
                    _, mask = sparsity_mask(upload, config.tol)
                    upload = apply_sparsity(server.global_params, upload, mask)
                uploads.append(upload)
            server = aggregate(server, uploads, plan, config.beta)
        round_times.append(time.perf_counter() - tic)

        pm_vals, gm_vals, loss_vals, sparsity_vals = [], [], [], []
        rows = []
        for state in clients:
            test = fed.test_sets[state.id]
            if config.algorithm == "cfedbayes":
                # Clients that never participated have no selection yet; score
                # them against the first bank entry.
                k = state.cluster_id if state.cluster_id is not None else 0
                gm_params = server.bank[k]
            else:
                gm_params = server.global_params
            pm = gm = None
            if classify:
                gm = evaluate(gm_params, shape, test)
                gm_vals.append(gm)
                if state.personal is not None:
                    pm = evaluate(state.personal, shape, test)
                    pm_vals.append(pm)
            loss_params = state.personal if state.personal is not None else gm_params
            loss = _train_loss(loss_params, shape, state.train_data)
            loss_vals.append(loss)
            spars = None
            if sparse:
                spars = float(np.mean(state.personal.lam > 0.5))
                sparsity_vals.append(spars)
            rows.append(
                [
                    t + 1,
                    state.id,
                    _fmt(pm),
                    _fmt(gm),
                    _fmt(loss),
                    _fmt(spars),
                    _fmt(state.cluster_id),
                    "",
                ]
            )
        mean_row = [
            t + 1,
            "",
            _fmt(float(np.mean(pm_vals)) if pm_vals else None),
            _fmt(float(np.mean(gm_vals)) if gm_vals else None),
            _fmt(float(np.mean(loss_vals))),
            _fmt(float(np.mean(sparsity_vals)) if sparsity_vals else None),
            "",
            "",
        ]
        writer.writerows(rows)
        writer.writerow(mean_row)
        if pm_vals:
            pm_mean_series.append(float(np.mean(pm_vals)))
        if gm_vals:
            gm_mean_series.append(float(np.mean(gm_vals)))
        if (t + 1) in config.snapshot_rounds:
            _save_snapshot(run_dir, t + 1, clients)

    (run_dir / "metrics.csv").write_text(buffer.getvalue())
    _save_final_state(run_dir / "final_state.bin", server, clients)

    summary: dict = {
        "algorithm": config.algorithm,
        "dataset": config.dataset,
        "rounds": config.rounds,
        "global_seed": config.global_seed,
        "pm_final": None,
        "gm_final": None,
        "window": None,
        "cluster_assignments": [
            -1 if s.cluster_id is None else s.cluster_id for s in clients
        ],
        "ground_truth_clusters": fed.ground_truth,
        "wall_time_s_total": float(sum(round_times)),
        "wall_time_s_per_round_mean": float(np.mean(round_times)),
    }
    if pm_mean_series:
        score, at_round, window = final_score(pm_mean_series)
        summary.update(pm_final=score, pm_round_of_max=at_round, window=window)
        summary["pm_last"] = pm_mean_series[-1]
        summary["pm_series_mean"] = pm_mean_series
    if gm_mean_series:
        score, at_round, window = final_score(gm_mean_series)
        summary.update(gm_final=score, gm_round_of_max=at_round, window=window)
        summary["gm_last"] = gm_mean_series[-1]
    if sparse:
        summary["mean_lambda_personal"] = float(
            np.mean([np.mean(s.personal.lam) for s in clients])
        )
        summary["mean_lambda_global"] = float(np.mean(server.global_params.lam))
        summary["sparsity_final"] = float(
            np.mean([np.mean(s.personal.lam > 0.5) for s in clients])
        )
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return RunResult(run_dir=run_dir, summary=summary, config=config)


def uncertainty(run_dir, n_samples: int = 16, max_rows: int = 500) -> list[tuple]:
    """Recompute predictive entropies for every snapshot in a run directory.

    Rebuilds the federation from the effective config (data splits are a
    pure function of the seed), scores each snapshotted client posterior on
    up to max_rows of that client's held-out split, and writes
    uncertainty.csv with columns round,client_id,mean_entropy. Returns the
    rows as (round, client_id, mean_entropy) tuples.
    """
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.effective.toml")
    if config.task != "classification":
        raise ConfigurationError("uncertainty analysis requires a classification run")
    snap_dir = run_dir / "snapshots"
    if not snap_dir.is_dir():
        raise ConfigurationError(f"no snapshots directory under {run_dir}")
    rounds = sorted(
        int(p.stem.replace("round", "")) for p in snap_dir.glob("round*.npz")
    )
    if not rounds:
        raise ConfigurationError(f"no snapshot files under {snap_dir}")
    fed = build_federation(config)
    shape = config.shape
    sparse = config.algorithm == "sfedbayes"
    rows = []
    for r in rounds:
        params = _load_snapshot(run_dir, r, config.num_clients, sparse)
        for i in range(config.num_clients):
            inputs = fed.test_sets[i].inputs[:max_rows]
            _, entropy = predictive(params[i], shape, inputs, n_samples, config.global_seed)
            rows.append((r, i, float(np.mean(entropy))))
    lines = [UNCERTAINTY_HEADER]
    lines += [f"{r},{i},{repr(e)}" for r, i, e in rows]
    (run_dir / "uncertainty.csv").write_text("\n".join(lines) + "\n")
    return rows


def run_klcheck(seed: int = 0, pairs: int = 20, samples: int = 1_000_000) -> dict:
    """Cross-validate the closed-form Gaussian KL against Monte Carlo.

    Random (q, w) pairs at dimensions cycling through 1, 10, 50; relative
    error uses a 0.01-nat floor so near-identical pairs do not divide by
    zero. Passes when every pair agrees within 1%.
    """
    gen = rng.stream(seed)
    dims = (1, 10, 50)
    worst = 0.0
    details = []
    for p in range(pairs):
        T = dims[p % len(dims)]
        q = VariationalParams(gen.normal(0, 1, T), gen.uniform(-1.5, 0.5, T))
        w = VariationalParams(gen.normal(0, 1, T), gen.uniform(-1.5, 0.5, T))
        exact = kl_gaussian(q, w)
        mc = mc_kl_estimate(q, w, samples, seed=int(gen.integers(1 << 31)))
        rel = abs(exact - mc) / max(exact, 0.01)
        worst = max(worst, rel)
        details.append({"dim": T, "exact": exact, "mc": mc, "rel_err": rel})
    return {
        "check": "klcheck",
        "pairs": pairs,
        "samples": samples,
        "max_rel_err": worst,
        "threshold": 0.01,
        "passed": bool(worst < 0.01),
        "details": details,
    }


def _random_toy_problem(gen, sparse: bool):
    widths = (
        int(gen.integers(2, 9)),
        int(gen.integers(2, 17)),
        int(gen.integers(2, 5)),
    )
    shape = NetworkShape(layer_widths=widths, task="classification")
    T = shape.param_count
    b, n, a = 4, 12, int(gen.integers(1, 3))
    x = gen.uniform(-1, 1, (b, widths[0]))
    y = gen.integers(0, widths[-1], b)
    batch = Batch(x, y)
    zeta = float(gen.uniform(1.0, 10.0))

    def draw_params():
        base = VariationalParams(gen.normal(0, 0.5, T), gen.uniform(-1.5, 0.0, T))
        if sparse:
            return SparseVariationalParams(base, gen.uniform(0.2, 0.8, T))
        return base

    v, w = draw_params(), draw_params()
    noise = [
        NoiseDraw(
            gen.standard_normal(T),
            np.clip(gen.random(T), 1e-9, 1 - 1e-9) if sparse else None,
        )
        for _ in range(a)
    ]
    return shape, v, w, batch, n, a, zeta, noise


def _pack(params, sparse: bool) -> np.ndarray:
    parts = [params.mu, params.rho] + ([params.lam] if sparse else [])
    return np.concatenate(parts)


def _unpack(flat: np.ndarray, sparse: bool):
    T = flat.size // (3 if sparse else 2)
    base = VariationalParams(flat[:T], flat[T : 2 * T])
    if sparse:
        return SparseVariationalParams(base, flat[2 * T :])
    return base


def _grad_vector(g, sparse: bool) -> np.ndarray:
    parts = [g.d_mu, g.d_rho] + ([g.d_lambda] if sparse else [])
    return np.concatenate(parts)


def run_gradcheck(seed: int = 0, configs: int = 10, h: float = 1e-5) -> dict:
    """Compare analytic objective gradients against central finite
    differences on random toy problems, for both objectives and both
    targets. Sparse personal gradients are checked in soft-gate mode, where
    the objective is differentiable in lambda; the straight-through hard
    gate shares the mu/rho path by construction.
    """
    gen = rng.stream(seed, 11)
    tau = 0.5
    worst = 0.0
    details = []
    for kind in ("pfedbayes", "sfedbayes"):
        sparse = kind == "sfedbayes"
        gate = "soft" if sparse else "hard"
        for target in ("personal", "localized_global"):
            for c in range(configs):
                shape, v, w, batch, n, a, zeta, noise = _random_toy_problem(gen, sparse)

                if target == "personal":
                    def f(flat):
                        vv = _unpack(flat, sparse)
                        if sparse:
                            return objective_sfedbayes(
                                shape, vv, w, batch, n, a, zeta, tau, noise, gate=gate
                            )
                        return objective_pfedbayes(shape, vv, w, batch, n, a, zeta, noise)

                    point = _pack(v, sparse)
                else:
                    def f(flat):
                        ww = _unpack(flat, sparse)
                        if sparse:
                            return kl_bernoulli_gaussian_upper(v, ww)
                        return kl_gaussian(v, ww)

                    point = _pack(w, sparse)
                analytic = _grad_vector(
                    grad_objective(
                        kind, target, shape, v, w, batch, n, a, zeta, tau, noise, gate=gate
                    ),
                    sparse,
                )
                numeric = finite_diff_grad(f, point, h)
                rel = float(
                    np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8))
                )
                worst = max(worst, rel)
                details.append(
                    {"kind": kind, "target": target, "config": c, "max_rel_err": rel}
                )
    return {
        "check": "gradcheck",
        "configs": configs,
        "h": h,
        "max_rel_err": worst,
        "threshold": 1e-4,
        "passed": bool(worst < 1e-4),
        "details": details,
    }


def run_aggcheck(seed: int = 0, client_sets: int = 10, perturbations: int = 100) -> dict:
    """Verify the closed-form server optimum against its defining objective.

    For random client sets, the average KL to the closed-form global must
    have near-zero finite-difference gradient at the optimum (stationarity)
    and must not decrease under random perturbations (minimality).
    """
    gen = rng.stream(seed, 13)
    h = 1e-5
    worst_resid = 0.0
    violations = 0
    details = []
    for s in range(client_sets):
        T = int(gen.integers(3, 21))
        m = int(gen.integers(3, 9))
        clients = [
            VariationalParams(gen.normal(0, 1, T), gen.uniform(0.0, 1.0, T))
            for _ in range(m)
        ]
        star = optimal_global(clients)

        def F(flat):
            w = VariationalParams(flat[:T], flat[T:])
            return float(np.mean([kl_gaussian(q, w) for q in clients]))

        point = np.concatenate([star.mu, star.rho])
        resid = float(np.max(np.abs(finite_diff_grad(F, point, h))))
        worst_resid = max(worst_resid, resid)
        base_val = F(point)
        for _ in range(perturbations):
            delta = gen.normal(0, 0.01, 2 * T)
            if F(point + delta) < base_val:
                violations += 1
        details.append({"set": s, "T": T, "clients": m, "residual": resid})
    return {
        "check": "aggcheck",
        "client_sets": client_sets,
        "perturbations": perturbations,
        "max_residual": worst_resid,
        "threshold": 1e-8,
        "minimality_violations": violations,
        "passed": bool(worst_resid < 1e-8 and violations == 0),
        "details": details,
    }


def partition_report(config: ExperimentConfig) -> dict:
    """Per-client label histograms for the configured partition."""
    fed = build_federation(config)
    report = {"dataset": config.dataset, "num_clients": config.num_clients, "clients": []}
    for state in fed.clients:
        test = fed.test_sets[state.id]
        if state.train_data.labels.ndim != 1:
            raise ConfigurationError("partition inspection requires class labels")
        labels, counts = np.unique(state.train_data.labels, return_counts=True)
        _, test_counts = np.unique(test.labels, return_counts=True)
        report["clients"].append(
            {
                "client_id": state.id,
                "labels": [int(c) for c in labels],
                "train_counts": [int(c) for c in counts],
                "test_counts": [int(c) for c in test_counts],
                "train_size": state.train_data.size,
                "test_size": test.size,
            }
        )
    return report
