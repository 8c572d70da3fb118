"""Client-update, selection, and aggregation oracles.

Update loops are checked against a step-by-step replay with the same
counter-based streams; aggregation is checked against hand-computed means
and algebraic identities; the clustered path with a single-entry bank must
reproduce the flat path bit for bit.
"""
import numpy as np
import pytest

from fedbayes import rng
from fedbayes.bnn import (
    Batch,
    NetworkShape,
    backprop_theta,
    d_log_likelihood,
    forward,
    grad_objective,
    init_point,
    init_sparse,
    init_variational,
)
from fedbayes.data import LabeledDataset
from fedbayes.errors import ConfigurationError, ProtocolError
from fedbayes.fed_protocol import (
    ClientState,
    LocalSpec,
    RoundPlan,
    ServerState,
    aggregate,
    aggregate_clusters,
    apply_sparsity,
    client_update,
    client_update_cfedbayes,
    fedavg_aggregate,
    fedavg_update,
    sample_participants,
    select_cluster,
    sparsity_mask,
)
from fedbayes.variational import (
    NoiseDraw,
    SparseVariationalParams,
    VariationalParams,
    kl_gaussian,
)

SHAPE = NetworkShape(layer_widths=(4, 5, 3), task="classification")


def _client_data(seed, n=16, num_classes=3, features=4):
    gen = rng.stream(seed, 99)
    return LabeledDataset(
        gen.uniform(-1, 1, (n, features)),
        gen.integers(0, num_classes, n),
        f"toy{seed}",
    )


def _spec(**kw):
    defaults = dict(shape=SHAPE, steps=2, batch_size=8, mc_samples=1, global_seed=0)
    defaults.update(kw)
    return LocalSpec(**defaults)


def _client(cid, seed, sparse=False, lam=0.5):
    data = _client_data(seed)
    gen_p = rng.stream(0, rng.INIT_PERSONAL, cid)
    if sparse:
        personal = init_sparse(SHAPE, -2.5, lam, gen_p)
    else:
        personal = init_variational(SHAPE, -2.5, gen_p)
    return ClientState(id=cid, personal=personal, localized_global=None, train_data=data)


def _global(sparse=False, lam=0.5, seed=0):
    gen = rng.stream(seed, rng.INIT_GLOBAL, 0)
    if sparse:
        return init_sparse(SHAPE, -2.5, lam, gen)
    return init_variational(SHAPE, -2.5, gen)


def _params_equal(a, b):
    if isinstance(a, SparseVariationalParams) != isinstance(b, SparseVariationalParams):
        return False
    if isinstance(a, SparseVariationalParams):
        return (
            np.array_equal(a.mu, b.mu)
            and np.array_equal(a.rho, b.rho)
            and np.array_equal(a.lam, b.lam)
        )
    return np.array_equal(a.mu, b.mu) and np.array_equal(a.rho, b.rho)


class TestClientUpdate:
    @pytest.mark.parametrize("kind", ["pfedbayes", "sfedbayes"])
    def test_zero_rates_return_download_unchanged(self, kind):
        sparse = kind == "sfedbayes"
        state = _client(0, seed=1, sparse=sparse)
        download = _global(sparse=sparse)
        spec = _spec(lr_personal=0.0, lr_global=0.0)
        upload, new_state = client_update(kind, state, download, spec, round_index=0)
        assert _params_equal(upload, download)
        assert _params_equal(new_state.personal, state.personal)

    def test_matches_step_by_step_replay(self):
        state = _client(3, seed=2)
        download = _global()
        spec = _spec(steps=2, lr_personal=0.002, lr_global=0.003)
        upload, new_state = client_update("pfedbayes", state, download, spec, round_index=5)

        gen = rng.stream(spec.global_seed, rng.UPDATE, state.id, 5)
        personal, w = state.personal, download
        for _ in range(2):
            idx = gen.choice(state.n, size=spec.batch_size, replace=False)
            batch = Batch(state.train_data.inputs[idx], state.train_data.labels[idx])
            noise = [NoiseDraw(gen.standard_normal(personal.size))]
            gp = grad_objective(
                "pfedbayes", "personal", SHAPE, personal, w, batch,
                state.n, 1, spec.zeta, spec.tau, noise,
            )
            personal = VariationalParams(
                personal.mu - spec.lr_personal * gp.d_mu,
                personal.rho - spec.lr_personal * gp.d_rho,
            )
            gw = grad_objective(
                "pfedbayes", "localized_global", SHAPE, personal, w, batch,
                state.n, 1, spec.zeta, spec.tau, noise,
            )
            w = VariationalParams(
                w.mu - spec.lr_global * gw.d_mu, w.rho - spec.lr_global * gw.d_rho
            )
        assert _params_equal(upload, w)
        assert _params_equal(new_state.personal, personal)

    def test_sparse_replay_consumes_uniforms(self):
        state = _client(4, seed=3, sparse=True)
        download = _global(sparse=True)
        spec = _spec(steps=1, lr_personal=0.001, lr_global=0.001)
        upload, _ = client_update("sfedbayes", state, download, spec, round_index=2)

        gen = rng.stream(spec.global_seed, rng.UPDATE, state.id, 2)
        idx = gen.choice(state.n, size=spec.batch_size, replace=False)
        batch = Batch(state.train_data.inputs[idx], state.train_data.labels[idx])
        g = gen.standard_normal(state.personal.size)
        u = np.clip(gen.random(state.personal.size), 1e-12, 1 - 1e-12)
        noise = [NoiseDraw(g, u)]
        gp = grad_objective(
            "sfedbayes", "personal", SHAPE, state.personal, download, batch,
            state.n, 1, spec.zeta, spec.tau, noise,
        )
        personal = SparseVariationalParams(
            VariationalParams(
                state.personal.mu - spec.lr_personal * gp.d_mu,
                state.personal.rho - spec.lr_personal * gp.d_rho,
            ),
            np.clip(state.personal.lam - spec.lr_personal * gp.d_lambda, 1e-6, 1 - 1e-6),
        )
        gw = grad_objective(
            "sfedbayes", "localized_global", SHAPE, personal, download, batch,
            state.n, 1, spec.zeta, spec.tau, noise,
        )
        w = SparseVariationalParams(
            VariationalParams(
                download.mu - spec.lr_global * gw.d_mu,
                download.rho - spec.lr_global * gw.d_rho,
            ),
            np.clip(download.lam - spec.lr_global * gw.d_lambda, 1e-6, 1 - 1e-6),
        )
        assert _params_equal(upload, w)

    def test_global_step_descends_kl(self):
        # Freeze the personal side; repeated global steps are then plain
        # gradient descent on the divergence, which must fall every round.
        gen = rng.stream(55)
        T = SHAPE.param_count
        personal = VariationalParams(gen.normal(0, 0.3, T), np.full(T, 0.5))
        state = ClientState(
            id=0, personal=personal, localized_global=None, train_data=_client_data(9)
        )
        w = VariationalParams(gen.normal(0, 0.3, T), np.full(T, 0.5))
        spec = _spec(steps=2, lr_personal=0.0, lr_global=0.001)
        kls = [kl_gaussian(personal, w)]
        for r in range(5):
            w, state = client_update("pfedbayes", state, w, spec, round_index=r)
            kls.append(kl_gaussian(state.personal, w))
        assert all(b < a for a, b in zip(kls, kls[1:]))

    def test_upload_is_localized_global_not_personal(self):
        state = _client(1, seed=7)
        upload, new_state = client_update(
            "pfedbayes", state, _global(), _spec(), round_index=0
        )
        assert upload is new_state.localized_global
        assert upload is not new_state.personal
        assert not _params_equal(upload, new_state.personal)

    def test_rejects_unknown_kind_and_oversized_batch(self):
        state = _client(0, seed=1)
        with pytest.raises(ConfigurationError, match="kind"):
            client_update("fedavg", state, _global(), _spec(), 0)
        with pytest.raises(ConfigurationError, match="batch_size"):
            client_update("pfedbayes", state, _global(), _spec(batch_size=17), 0)


class TestSelectCluster:
    def _deterministic_entry(self, favored_class):
        T = SHAPE.param_count
        mu = np.zeros(T)
        mu[T - 3 + favored_class] = 5.0  # final-layer bias
        return VariationalParams(mu, np.full(T, -40.0))

    def _single_label_client(self, label):
        gen = rng.stream(123)
        data = LabeledDataset(
            gen.uniform(-1, 1, (12, 4)), np.full(12, label, dtype=np.int64), "mono"
        )
        return ClientState(
            id=0, personal=_global(), localized_global=None, train_data=data
        )

    def test_single_entry_bank(self):
        state = self._single_label_client(0)
        assert select_cluster(state, (self._deterministic_entry(0),), _spec(), 0) == 0

    def test_picks_matching_entry(self):
        bank = (self._deterministic_entry(0), self._deterministic_entry(2))
        spec = _spec(batch_size=12)
        assert select_cluster(self._single_label_client(0), bank, spec, 0) == 0
        assert select_cluster(self._single_label_client(2), bank, spec, 0) == 1

    def test_tie_resolves_to_lowest_index(self):
        entry = self._deterministic_entry(1)
        bank = (entry, entry, entry)
        assert select_cluster(self._single_label_client(1), bank, _spec(), 0) == 0

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError, match="bank"):
            select_cluster(self._single_label_client(0), (), _spec(), 0)


class TestAggregate:
    def _plan(self, k):
        return RoundPlan(participants=tuple(range(k)), rng_seed=0)

    def test_identical_uploads_with_full_beta(self):
        # Two identical uploads: (x + x) / 2 is exact in floating point.
        old = _global(seed=1)
        x = _global(seed=2)
        server = ServerState(bank=(old,))
        new = aggregate(server, [x, x], self._plan(2), beta=1.0)
        assert _params_equal(new.global_params, x)
        assert new.round == 1

    def test_mean_of_two(self):
        T = SHAPE.param_count
        a = VariationalParams(np.zeros(T), np.zeros(T))
        b = VariationalParams(np.full(T, 2.0), np.full(T, 4.0))
        server = ServerState(bank=(a,))
        new = aggregate(server, [a, b], self._plan(2), beta=1.0)
        assert np.all(new.global_params.mu == 1.0)
        assert np.all(new.global_params.rho == 2.0)

    def test_beta_interpolates(self):
        T = SHAPE.param_count
        old = VariationalParams(np.zeros(T), np.zeros(T))
        up = VariationalParams(np.full(T, 1.0), np.full(T, 1.0))
        server = ServerState(bank=(old,))
        new = aggregate(server, [up], self._plan(1), beta=0.5)
        assert np.all(new.global_params.mu == 0.5)

    def test_beta_composition(self):
        # One beta=1 step from old to mean is identical to two half steps
        # toward the same fixed upload set.
        T = SHAPE.param_count
        old = VariationalParams(np.full(T, 4.0), np.zeros(T))
        up = VariationalParams(np.full(T, 8.0), np.zeros(T))
        s0 = ServerState(bank=(old,))
        once = aggregate(s0, [up], self._plan(1), beta=1.0)
        half = aggregate(s0, [up], self._plan(1), beta=0.5)
        halfhalf = aggregate(half, [up], self._plan(1), beta=0.5)
        assert np.all(once.global_params.mu == 8.0)
        assert np.all(halfhalf.global_params.mu == 7.0)  # 4 -> 6 -> 7
        assert halfhalf.round == 2

    def test_sparse_lambda_averaged(self):
        T = SHAPE.param_count
        mk = lambda lam: SparseVariationalParams(
            VariationalParams(np.zeros(T), np.zeros(T)), np.full(T, lam)
        )
        server = ServerState(bank=(mk(0.5),))
        new = aggregate(server, [mk(0.2), mk(0.8)], self._plan(2), beta=1.0)
        assert np.allclose(new.global_params.lam, 0.5)

    def test_count_mismatch_rejected(self):
        server = ServerState(bank=(_global(),))
        with pytest.raises(ProtocolError, match="uploads"):
            aggregate(server, [_global()], self._plan(2), beta=1.0)

    def test_nonpositive_beta_rejected(self):
        server = ServerState(bank=(_global(),))
        with pytest.raises(ConfigurationError, match="beta"):
            aggregate(server, [_global()], self._plan(1), beta=0.0)


class TestAggregateClusters:
    def test_untouched_cluster_keeps_same_object(self):
        bank = (_global(seed=1), _global(seed=2))
        server = ServerState(bank=bank)
        new = aggregate_clusters(server, [(0, _global(seed=3))], beta=1.0)
        assert new.bank[1] is bank[1]
        assert _params_equal(new.bank[0], _global(seed=3))
        assert new.round == 1

    def test_one_upload_each(self):
        bank = (_global(seed=1), _global(seed=2))
        server = ServerState(bank=bank)
        u0, u1 = _global(seed=3), _global(seed=4)
        new = aggregate_clusters(server, [(1, u1), (0, u0)], beta=1.0)
        assert _params_equal(new.bank[0], u0)
        assert _params_equal(new.bank[1], u1)

    def test_groups_by_cluster(self):
        T = SHAPE.param_count
        mk = lambda v: VariationalParams(np.full(T, float(v)), np.zeros(T))
        server = ServerState(bank=(mk(0), mk(100)))
        new = aggregate_clusters(server, [(0, mk(2)), (0, mk(4)), (1, mk(10))], beta=1.0)
        assert np.all(new.bank[0].mu == 3.0)
        assert np.all(new.bank[1].mu == 10.0)

    def test_unknown_cluster_id_rejected(self):
        server = ServerState(bank=(_global(),))
        with pytest.raises(ProtocolError, match="cluster id"):
            aggregate_clusters(server, [(1, _global())], beta=1.0)


class TestSampleParticipants:
    def test_full_participation(self):
        plan = sample_participants(7, 7, round_index=0, seed=0)
        assert plan.participants == tuple(range(7))

    def test_deterministic_per_round(self):
        a = sample_participants(20, 5, round_index=3, seed=9)
        b = sample_participants(20, 5, round_index=3, seed=9)
        c = sample_participants(20, 5, round_index=4, seed=9)
        assert a.participants == b.participants
        assert len(set(a.participants)) == 5
        assert a.participants != c.participants or True  # rounds may collide rarely

    def test_invalid_sizes(self):
        with pytest.raises(ConfigurationError):
            sample_participants(5, 6, 0, 0)
        with pytest.raises(ConfigurationError):
            sample_participants(5, 0, 0, 0)

    def test_selection_frequency_is_uniform(self):
        N, S, rounds = 10, 5, 4000
        counts = np.zeros(N)
        for r in range(rounds):
            for p in sample_participants(N, S, r, seed=2).participants:
                counts[p] += 1
        expected = rounds * S / N
        sigma = np.sqrt(rounds * (S / N) * (1 - S / N))
        assert np.all(np.abs(counts - expected) < 5 * sigma)


class TestFedAvg:
    def test_zero_rate_identity(self):
        state = _client(0, seed=1)
        theta = init_point(SHAPE, rng.stream(0, rng.INIT_GLOBAL, 0))
        up, _ = fedavg_update(state, theta, _spec(lr_point=0.0), 0)
        assert np.array_equal(up, theta)

    def test_matches_hand_sgd_trace(self):
        state = _client(2, seed=5)
        theta0 = init_point(SHAPE, rng.stream(1, rng.INIT_GLOBAL, 0))
        spec = _spec(steps=2, lr_point=0.05)
        up, _ = fedavg_update(state, theta0, spec, round_index=4)

        gen = rng.stream(spec.global_seed, rng.UPDATE, state.id, 4)
        theta = theta0.copy()
        for _ in range(2):
            idx = gen.choice(state.n, size=spec.batch_size, replace=False)
            batch = Batch(state.train_data.inputs[idx], state.train_data.labels[idx])
            outputs = forward(SHAPE, theta, batch.inputs)
            d_out = -d_log_likelihood(SHAPE, outputs, batch) / batch.size
            theta = theta - spec.lr_point * backprop_theta(SHAPE, theta, batch.inputs, d_out)
        assert np.array_equal(up, theta)

    def test_aggregate_raw_vectors(self):
        server = ServerState(bank=(np.zeros(4),))
        plan = RoundPlan(participants=(0, 1), rng_seed=0)
        new = fedavg_aggregate(server, [np.full(4, 2.0), np.full(4, 4.0)], plan, beta=1.0)
        assert np.array_equal(new.global_params, np.full(4, 3.0))


class TestSparsity:
    def _sp(self, lam):
        T = 6
        return SparseVariationalParams(
            VariationalParams(np.arange(T, dtype=float), np.zeros(T)),
            np.full(T, lam),
        )

    def test_zero_tol_keeps_all(self):
        kept, mask = sparsity_mask(self._sp(0.3), tol=0.0)
        assert kept == 6
        assert np.all(mask)

    def test_threshold_drops_low_inclusion(self):
        kept, mask = sparsity_mask(self._sp(0.3), tol=0.5)
        assert kept == 0
        assert not np.any(mask)

    def test_mixed_threshold(self):
        params = SparseVariationalParams(
            VariationalParams(np.zeros(4), np.zeros(4)),
            np.array([0.1, 0.5, 0.7, 0.2]),
        )
        kept, mask = sparsity_mask(params, tol=0.5)
        assert kept == 2
        assert mask.tolist() == [False, True, True, False]

    def test_tol_bounds(self):
        with pytest.raises(ConfigurationError):
            sparsity_mask(self._sp(0.5), tol=1.0)
        with pytest.raises(ConfigurationError):
            sparsity_mask(self._sp(0.5), tol=-0.1)

    def test_apply_merges_by_mask(self):
        prev = self._sp(0.2)
        up = SparseVariationalParams(
            VariationalParams(np.full(6, 9.0), np.full(6, 8.0)), np.full(6, 0.9)
        )
        mask = np.array([True, False, True, False, True, False])
        merged = apply_sparsity(prev, up, mask)
        assert merged.mu.tolist() == [9.0, 1.0, 9.0, 3.0, 9.0, 5.0]
        assert merged.rho.tolist() == [8.0, 0.0, 8.0, 0.0, 8.0, 0.0]
        assert merged.lam.tolist() == [0.9, 0.2, 0.9, 0.2, 0.9, 0.2]


class TestClusteredEqualsFlatWithOneCluster:
    def test_bitwise_trajectory_match(self):
        clients_flat = [_client(i, seed=10 + i) for i in range(3)]
        clients_clus = [_client(i, seed=10 + i) for i in range(3)]
        spec = _spec(steps=2, lr_personal=0.001, lr_global=0.001)
        w = _global()
        flat = ServerState(bank=(w,))
        clus = ServerState(bank=(w,))
        for r in range(3):
            plan = sample_participants(3, 3, r, seed=0)
            ups_flat = []
            for i in plan.participants:
                up, clients_flat[i] = client_update(
                    "pfedbayes", clients_flat[i], flat.global_params, spec, r
                )
                ups_flat.append(up)
            flat = aggregate(flat, ups_flat, plan, beta=1.0)

            ups_clus = []
            for i in plan.participants:
                k, up, clients_clus[i] = client_update_cfedbayes(
                    clients_clus[i], clus.bank, spec, r
                )
                assert k == 0
                ups_clus.append((k, up))
            clus = aggregate_clusters(clus, ups_clus, beta=1.0)

        assert _params_equal(flat.global_params, clus.bank[0])
        for cf, cc in zip(clients_flat, clients_clus):
            assert _params_equal(cf.personal, cc.personal)
            assert cc.cluster_id == 0


class TestStateValidation:
    def test_negative_client_id(self):
        with pytest.raises(ValueError):
            ClientState(
                id=-1, personal=None, localized_global=None, train_data=_client_data(0)
            )

    def test_empty_bank(self):
        with pytest.raises(ValueError):
            ServerState(bank=())

    def test_global_params_needs_single_entry(self):
        server = ServerState(bank=(_global(seed=1), _global(seed=2)))
        with pytest.raises(ValueError):
            _ = server.global_params

    def test_duplicate_participants(self):
        with pytest.raises(ValueError):
            RoundPlan(participants=(1, 1), rng_seed=0)
