"""Scikit-learn style estimators wrapping the federated training loop.

Rows are assigned to clients through a ``groups`` vector passed to fit, the
same convention scikit-learn uses for grouped cross-validation; omitting it
trains a single-client federation. After fitting, ``predict`` and
``predict_proba`` score the server's global model; per-client personalized
models are available as fitted attributes and through predict_personal.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import rng
from .bnn import (
    NetworkShape,
    forward,
    init_point,
    init_sparse,
    init_variational,
)
from .data import LabeledDataset
from .errors import ConfigurationError
from .fed_protocol import (
    ClientState,
    LocalSpec,
    ServerState,
    aggregate,
    aggregate_clusters,
    client_update,
    client_update_cfedbayes,
    fedavg_aggregate,
    fedavg_update,
    sample_participants,
)
from .harness import _train_loss, mean_weights
from scipy.special import softmax


class _BaseFederated(BaseEstimator):
    """Shared fit/predict machinery; subclasses pick the algorithm."""

    _algorithm = None  # set by subclasses

    def __init__(
        self,
        hidden=(32,),
        task="classification",
        rounds=20,
        local_steps=5,
        batch_size=32,
        mc_samples=1,
        lr_personal=0.001,
        lr_global=0.001,
        lr_point=0.01,
        beta=1.0,
        zeta=10.0,
        tau=0.5,
        lambda_init=0.5,
        rho_init=-2.5,
        noise_sigma=1.0,
        participants=None,
        num_clusters=1,
        global_seed=0,
    ):
        self.hidden = hidden
        self.task = task
        self.rounds = rounds
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.mc_samples = mc_samples
        self.lr_personal = lr_personal
        self.lr_global = lr_global
        self.lr_point = lr_point
        self.beta = beta
        self.zeta = zeta
        self.tau = tau
        self.lambda_init = lambda_init
        self.rho_init = rho_init
        self.noise_sigma = noise_sigma
        self.participants = participants
        self.num_clusters = num_clusters
        self.global_seed = global_seed

    def _validate_inputs(self, X, y):
        if self.task not in ("classification", "regression"):
            raise ConfigurationError(f"unknown task: {self.task!r}")
        if self.task == "classification":
            X, y = check_X_y(X, y, dtype=np.float64)
            self.classes_, y_idx = np.unique(y, return_inverse=True)
            targets = y_idx.astype(np.int64)
            out_dim = self.classes_.size
            if out_dim < 2:
                raise ConfigurationError("classification needs at least two classes")
        else:
            X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
            targets = np.asarray(y, dtype=np.float64)
            if targets.ndim == 1:
                targets = targets[:, None]
            out_dim = targets.shape[1]
        return X, targets, out_dim

    def _split_clients(self, X, targets, groups):
        if groups is None:
            groups = np.zeros(X.shape[0], dtype=np.int64)
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ConfigurationError(
                f"groups length {groups.shape[0]} != rows {X.shape[0]}"
            )
        self.groups_, inverse = np.unique(groups, return_inverse=True)
        datasets = []
        for i in range(self.groups_.size):
            idx = np.flatnonzero(inverse == i)
            datasets.append(LabeledDataset(X[idx], targets[idx], f"group{i}"))
        return datasets

    def _init_global(self, shape, k):
        gen = rng.stream(self.global_seed, rng.INIT_GLOBAL, k)
        if self._algorithm == "sfedbayes":
            return init_sparse(shape, self.rho_init, self.lambda_init, gen)
        if self._algorithm == "fedavg":
            return init_point(shape, gen)
        return init_variational(shape, self.rho_init, gen)

    def _init_personal(self, shape, i):
        if self._algorithm == "fedavg":
            return None
        gen = rng.stream(self.global_seed, rng.INIT_PERSONAL, i)
        if self._algorithm == "sfedbayes":
            return init_sparse(shape, self.rho_init, self.lambda_init, gen)
        return init_variational(shape, self.rho_init, gen)

    def fit(self, X, y, groups=None):
        """Train the federation on rows grouped into clients.

        groups assigns each row to a client (any hashable values); None
        trains a single client holding all rows.
        """
        X, targets, out_dim = self._validate_inputs(X, y)
        datasets = self._split_clients(X, targets, groups)
        self.n_features_in_ = X.shape[1]
        widths = (self.n_features_in_, *(int(h) for h in self.hidden), out_dim)
        shape = NetworkShape(
            layer_widths=widths, task=self.task, noise_sigma=self.noise_sigma
        )
        batch_size = min(self.batch_size, min(d.size for d in datasets))
        spec = LocalSpec(
            shape=shape,
            steps=self.local_steps,
            batch_size=batch_size,
            mc_samples=self.mc_samples,
            lr_personal=self.lr_personal,
            lr_global=self.lr_global,
            lr_point=self.lr_point,
            zeta=self.zeta,
            tau=self.tau,
            global_seed=self.global_seed,
        )
        N = len(datasets)
        S = N if self.participants is None else min(self.participants, N)
        K = self.num_clusters if self._algorithm == "cfedbayes" else 1
        clients = [
            ClientState(
                id=i,
                personal=self._init_personal(shape, i),
                localized_global=None,
                train_data=datasets[i],
            )
            for i in range(N)
        ]
        server = ServerState(bank=tuple(self._init_global(shape, k) for k in range(K)))
        history = []
        for t in range(self.rounds):
            plan = sample_participants(N, S, t, self.global_seed)
            if self._algorithm == "cfedbayes":
                uploads = []
                for cid in plan.participants:
                    k, upload, clients[cid] = client_update_cfedbayes(
                        clients[cid], server.bank, spec, t
                    )
                    uploads.append((k, upload))
                server = aggregate_clusters(server, uploads, self.beta)
            elif self._algorithm == "fedavg":
                uploads = []
                for cid in plan.participants:
                    upload, clients[cid] = fedavg_update(
                        clients[cid], server.global_params, spec, t
                    )
                    uploads.append(upload)
                server = fedavg_aggregate(server, uploads, plan, self.beta)
            else:
                uploads = []
                for cid in plan.participants:
                    upload, clients[cid] = client_update(
                        self._algorithm, clients[cid], server.global_params, spec, t
                    )
                    uploads.append(upload)
                server = aggregate(server, uploads, plan, self.beta)
            ref = server.bank[0]
            history.append(
                float(
                    np.mean(
                        [
                            _train_loss(
                                c.personal if c.personal is not None else ref,
                                shape,
                                c.train_data,
                            )
                            for c in clients
                        ]
                    )
                )
            )
        self.shape_ = shape
        self.bank_ = server.bank
        self.global_params_ = server.bank[0] if len(server.bank) == 1 else None
        self.client_params_ = [c.personal for c in clients]
        self.cluster_ids_ = [c.cluster_id for c in clients]
        self.history_ = history
        self._post_fit(clients, server)
        return self

    def _post_fit(self, clients, server):
        pass

    def _global_weights(self):
        check_is_fitted(self, "bank_")
        entry = self.bank_[0]
        return mean_weights(entry)

    def _logits(self, X, theta):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return forward(self.shape_, theta, X)

    def predict(self, X):
        """Predict with the server's global model (mean weights)."""
        out = self._logits(X, self._global_weights())
        if self.task == "classification":
            return self.classes_[np.argmax(out, axis=1)]
        return out[:, 0] if out.shape[1] == 1 else out

    def predict_personal(self, X, group):
        """Predict with one client's personalized model."""
        check_is_fitted(self, "client_params_")
        matches = np.flatnonzero(self.groups_ == group)
        if matches.size != 1:
            raise ConfigurationError(f"unknown group: {group!r}")
        params = self.client_params_[int(matches[0])]
        if params is None:
            raise ConfigurationError("this algorithm keeps no personalized models")
        out = self._logits(X, mean_weights(params))
        if self.task == "classification":
            return self.classes_[np.argmax(out, axis=1)]
        return out[:, 0] if out.shape[1] == 1 else out

    def predict_proba(self, X):
        """Class probabilities from the global mean network."""
        if self.task != "classification":
            raise ConfigurationError("predict_proba requires classification")
        return softmax(self._logits(X, self._global_weights()), axis=1)

    def score(self, X, y):
        """Accuracy for classification, R^2 for regression."""
        pred = self.predict(X)
        y = np.asarray(y)
        if self.task == "classification":
            return float(np.mean(pred == y))
        y = y.astype(np.float64).reshape(pred.shape)
        ss_res = float(np.sum((y - pred) ** 2))
        ss_tot = float(np.sum((y - np.mean(y)) ** 2))
        return 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0


class PFedBayes(_BaseFederated):
    """Personalized variational federation with Gaussian posteriors."""

    _algorithm = "pfedbayes"


class SFedBayes(_BaseFederated):
    """Sparse variant: spike-and-slab posteriors with learned inclusion
    probabilities; exposes sparsity_ and mean_lambda_ after fitting."""

    _algorithm = "sfedbayes"

    def _post_fit(self, clients, server):
        lams = [c.personal.lam for c in clients]
        self.mean_lambda_ = float(np.mean([np.mean(l) for l in lams]))
        self.sparsity_ = float(np.mean([np.mean(l > 0.5) for l in lams]))


class CFedBayes(_BaseFederated):
    """Clustered variant: a bank of num_clusters global posteriors; clients
    re-select their cluster every round; exposes cluster_ids_."""

    _algorithm = "cfedbayes"

    def predict(self, X):
        check_is_fitted(self, "bank_")
        if len(self.bank_) == 1:
            return super().predict(X)
        raise ConfigurationError(
            "multi-cluster models have no single global predictor; use"
            " predict_personal or pick a bank_ entry"
        )


class FedAvg(_BaseFederated):
    """Deterministic-weight federated averaging baseline."""

    _algorithm = "fedavg"
