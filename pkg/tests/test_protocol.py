import numpy as np
import pytest

from protofed.cli import build_clients, build_models, execute
from protofed.config import ExperimentConfig
from protofed.data import generate_hierarchical_dataset
from protofed.errors import ConfigError, ProtocolError
from protofed.metrics import metrics_csv_text
from protofed.models import (
    ArchitectureSpec,
    average_models,
    forward_features,
    init_model,
)
from protofed.numerics import (
    contrastive_alignment,
    finite_difference_check,
    softmax_cross_entropy,
)
from protofed.protocol import (
    PrototypeBank,
    aggregate_global_prototypes,
    client_local_train,
    compute_local_prototypes,
    run_pfl_finetune,
    sample_participants,
)
from protofed.rng import RngStream


def desk_config(**kw):
    base = dict(
        method="fedtsp", seed=0, rounds=2, num_clients=5, superclusters=2,
        classes_per_super=2, samples_per_class=30, input_dim=8, feature_dim=6,
        sigma_super=2.0, sigma_class=0.6, alpha=0.8, holdout_per_class=4,
        local_epochs=2, batch_size=16, server_epochs=4, prompt_len=2,
        architectures=[[12], [16, 8]],
    )
    base.update(kw)
    return ExperimentConfig(**base)


def build_world(config):
    dataset = generate_hierarchical_dataset(
        config.superclusters, config.classes_per_super, config.samples_per_class,
        config.input_dim, config.sigma_class, config.sigma_super, config.seed,
    )
    holdout, clients = build_clients(config, dataset)
    models = build_models(config, dataset.input_dim, dataset.num_classes)
    return dataset, holdout, clients, models


def identity_feature_client(vectors, labels, num_classes):
    """Client whose zero-hidden 'identity' model makes features equal inputs."""
    from protofed.data import ClientDataset

    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    return ClientDataset(
        client_id=0,
        train_inputs=vectors,
        train_labels=labels,
        test_inputs=vectors,
        test_labels=labels,
        train_class_counts=counts,
    )


def identity_model(dim, num_classes=2):
    model = init_model(ArchitectureSpec((), "relu", dim), dim, num_classes, RngStream(0, "id"))
    model.weights[0] = np.eye(dim)
    model.biases[0] = np.zeros(dim)
    return model


class TestLocalPrototypes:
    def test_single_sample_prototype_is_its_feature(self):
        client = identity_feature_client([[3.0, -1.0]], [1], 2)
        entries = compute_local_prototypes(identity_model(2), client)
        assert entries == [(1, pytest.approx(np.array([3.0, -1.0])), 1)]

    def test_mean_of_two_features(self):
        client = identity_feature_client([[1.0, 0.0], [0.0, 1.0]], [0, 0], 2)
        entries = compute_local_prototypes(identity_model(2), client)
        assert entries[0][1] == pytest.approx(np.array([0.5, 0.5]))

    def test_matches_brute_force_per_sample_means(self):
        config = desk_config()
        _, _, clients, models = build_world(config)
        for model, client in zip(models, clients):
            entries = compute_local_prototypes(model, client)
            feats = forward_features(model, client.train_inputs)
            for c, vec, count in entries:
                rows = feats[client.train_labels == c]
                assert count == rows.shape[0]
                assert np.abs(vec - rows.mean(axis=0)).max() <= 1e-12
            assert [e[0] for e in entries] == sorted(client.present_classes().tolist())

    def test_uplink_payload_shape_is_private(self):
        # only per-class mean vectors with counts; never per-sample matrices
        config = desk_config()
        _, _, clients, models = build_world(config)
        d = config.feature_dim
        for model, client in zip(models, clients):
            for c, vec, count in compute_local_prototypes(model, client):
                assert vec.shape == (d,)
                assert isinstance(c, int) and isinstance(count, int)


class TestAggregation:
    def test_single_reporter_passes_through(self):
        bank = PrototypeBank.empty(2, 3)
        proto = np.array([1.0, 2.0, 3.0])
        aggregate_global_prototypes([[(0, proto, 4)]], bank, 0)
        assert np.array_equal(bank.matrix[0], proto)
        assert bank.mask.tolist() == [True, False]

    def test_sample_count_weighting(self):
        bank = PrototypeBank.empty(1, 2)
        p, q = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        aggregate_global_prototypes([[(0, p, 1)], [(0, q, 3)]], bank, 0)
        assert bank.matrix[0] == pytest.approx(0.25 * p + 0.75 * q)

    def test_equals_pooled_per_sample_mean(self):
        for seed in range(10):
            rng = RngStream(seed, "pool")
            num_classes, d = 3, 5
            bank = PrototypeBank.empty(num_classes, d)
            uplinks, per_class_samples = [], {c: [] for c in range(num_classes)}
            for _ in range(5):
                entries = []
                for c in range(num_classes):
                    n = 1 + RngStream(seed, "n", c).integer(6)
                    feats = rng.matrix(n, d)
                    per_class_samples[c].append(feats)
                    entries.append((c, feats.mean(axis=0), n))
                uplinks.append(entries)
            aggregate_global_prototypes(uplinks, bank, 0)
            for c in range(num_classes):
                pooled = np.concatenate(per_class_samples[c]).mean(axis=0)
                assert np.abs(bank.matrix[c] - pooled).max() <= 1e-9

    def test_uplink_order_invariance(self):
        rng = RngStream(4, "perm")
        uplinks = [[(0, rng.matrix(1, 4).ravel(), 1 + i)] for i in range(6)]
        a = PrototypeBank.empty(1, 4)
        b = PrototypeBank.empty(1, 4)
        aggregate_global_prototypes(uplinks, a, 0)
        aggregate_global_prototypes(list(reversed(uplinks)), b, 0)
        assert np.abs(a.matrix - b.matrix).max() <= 1e-12

    def test_unreported_class_keeps_prior_value(self):
        bank = PrototypeBank.empty(2, 2)
        aggregate_global_prototypes([[(0, np.ones(2), 1)]], bank, 0)
        aggregate_global_prototypes([[(1, np.full(2, 5.0), 2)]], bank, 1)
        assert np.array_equal(bank.matrix[0], np.ones(2))
        assert bank.last_updated.tolist() == [0, 1]

    def test_errors(self):
        bank = PrototypeBank.empty(1, 2)
        with pytest.raises(ProtocolError):
            aggregate_global_prototypes([], bank, 0)
        with pytest.raises(ProtocolError):
            aggregate_global_prototypes([[(0, np.ones(2), 0)]], bank, 0)


class TestClientLocalTrain:
    def test_lambda_zero_is_bitwise_plain_cross_entropy(self):
        config = desk_config()
        _, _, clients, models = build_world(config)
        protos = RngStream(1, "p").matrix(4, config.feature_dim)
        mask = np.ones(4, dtype=bool)
        a, b = models[0].clone(), models[0].clone()
        client_local_train(
            a, clients[0], protos, mask, 0.0, 0.07, 2, 8, 0.01,
            RngStream(9, "t"), "contrastive",
        )
        client_local_train(
            b, clients[0], None, None, 0.0, 0.07, 2, 8, 0.01,
            RngStream(9, "t"), "contrastive",
        )
        assert np.array_equal(a.flatten(), b.flatten())

    def test_zero_epochs_is_identity(self):
        config = desk_config()
        _, _, clients, models = build_world(config)
        before = models[0].flatten()
        client_local_train(
            models[0], clients[0], None, None, 0.0, 0.07, 0, 8, 0.01, RngStream(0, "t")
        )
        assert np.array_equal(models[0].flatten(), before)

    def test_negative_lambda_rejected(self):
        config = desk_config()
        _, _, clients, models = build_world(config)
        with pytest.raises(ConfigError):
            client_local_train(
                models[0], clients[0], None, None, -1.0, 0.07, 1, 8, 0.01, RngStream(0, "t")
            )

    @pytest.mark.parametrize("alignment", ["contrastive", "l2"])
    def test_full_objective_gradient_matches_finite_differences(self, alignment):
        rng = RngStream(33, "fdp")
        d_in, d, classes, batch = 5, 4, 3, 5
        x = rng.matrix(batch, d_in)
        y = np.array([0, 1, 2, 0, 1])
        protos = rng.matrix(classes, d)
        client = identity_feature_client(x, y, classes)
        client.train_inputs = x
        model = init_model(ArchitectureSpec((6,), "tanh", d), d_in, classes, RngStream(2, "m"))
        lam, tau = 2.0, 0.5

        def loss_at(flat):
            probe = model.clone()
            probe.load_flat(flat)
            feats = forward_features(probe, x)
            logits = feats @ probe.clf_weight + probe.clf_bias
            ce, _ = softmax_cross_entropy(logits, y)
            total = ce
            for s in range(batch):
                if alignment == "contrastive":
                    term, _, _ = contrastive_alignment(feats[s], protos, int(y[s]), tau)
                else:
                    diff = feats[s] - protos[y[s]]
                    term = float(diff @ diff)
                total += lam * term / batch
            return total

        stepped = model.clone()
        client_local_train(
            stepped, client, protos, np.ones(classes, dtype=bool), lam, tau,
            epochs=1, batch_size=batch, lr=1.0, rng=RngStream(5, "t"), alignment=alignment,
        )
        analytic = model.flatten() - stepped.flatten()
        err = finite_difference_check(loss_at, model.flatten(), analytic, 1e-5)
        assert err <= 1e-4

    def test_masked_class_contributes_only_cross_entropy(self):
        rng = RngStream(44, "mask")
        x = rng.matrix(4, 3)
        y = np.array([0, 0, 1, 1])
        client = identity_feature_client(x, y, 2)
        protos = rng.matrix(2, 3)
        mask_none = np.zeros(2, dtype=bool)
        a = identity_model(3)
        b = identity_model(3)
        client_local_train(a, client, protos, mask_none, 5.0, 0.5, 1, 4, 0.1, RngStream(1, "s"))
        client_local_train(b, client, None, None, 0.0, 0.5, 1, 4, 0.1, RngStream(1, "s"))
        assert np.array_equal(a.flatten(), b.flatten())


class TestParticipants:
    def test_full_participation(self):
        out = sample_participants(7, 1.0, 0, RngStream(0, "p"))
        assert out.tolist() == list(range(7))

    def test_cross_device_count(self):
        out = sample_participants(50, 0.2, 3, RngStream(0, "p", round_index=3))
        assert len(out) == 10
        assert len(set(out.tolist())) == 10

    def test_deterministic_per_round(self):
        a = sample_participants(30, 0.3, 5, RngStream(2, "p", round_index=5))
        b = sample_participants(30, 0.3, 5, RngStream(2, "p", round_index=5))
        c = sample_participants(30, 0.3, 6, RngStream(2, "p", round_index=6))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestRunLoop:
    def test_zero_rounds_yields_initial_evaluation_only(self):
        result = execute(desk_config(rounds=0))
        assert len(result.history) == 1
        assert result.history[0].round_index == 0

    def test_fixed_seed_reruns_identically(self):
        a = execute(desk_config(rounds=2))
        b = execute(desk_config(rounds=2))
        assert metrics_csv_text(a.history) == metrics_csv_text(b.history)

    def test_parallel_clients_do_not_change_results(self):
        a = execute(desk_config(rounds=2))
        b = execute(desk_config(rounds=2, threads=4))
        assert metrics_csv_text(a.history) == metrics_csv_text(b.history)

    def test_communication_accounting(self):
        config = desk_config(rounds=3)
        result = execute(config)
        _, _, clients, _ = build_world(config)
        num_classes, d = 4, config.feature_dim
        # downlink: C x d floats to each participant, every training round
        for m in result.history[1:]:
            assert m.downlink_floats == num_classes * d * config.num_clients
        # uplink: (#present classes) x d per participant; initial round included
        expected = sum(len(c.present_classes()) * d for c in clients)
        for m in result.history:
            assert m.uplink_floats == expected

    def test_fedtsp_reduces_to_local_when_disabled(self):
        reduced = execute(desk_config(lambda_=0.0, server_epochs=0, prompt_len=0, rounds=2))
        local = execute(desk_config(method="local", rounds=2))
        for a, b in zip(reduced.models, local.models):
            assert np.array_equal(a.flatten(), b.flatten())


class TestModelHomogeneousModes:
    def gfl_config(self, **kw):
        base = dict(mode="gfl", architectures=[[12]], method="fedavg", participation_rate=1.0)
        base.update(kw)
        return desk_config(**base)

    def test_heterogeneous_gfl_rejected(self):
        with pytest.raises(ConfigError):
            desk_config(mode="gfl", architectures=[[8], [12]])

    def test_gfl_matches_independent_fedavg_loop(self):
        config = self.gfl_config(rounds=5)
        result = execute(config)

        # independently coded FedAvg: same init and client streams, own loop
        dataset = generate_hierarchical_dataset(
            config.superclusters, config.classes_per_super, config.samples_per_class,
            config.input_dim, config.sigma_class, config.sigma_super, config.seed,
        )
        _, clients = build_clients(config, dataset)
        shared = init_model(
            ArchitectureSpec((12,), config.activation, config.feature_dim),
            dataset.input_dim, dataset.num_classes,
            RngStream(config.seed, "model-init", client=0),
        )
        models = [shared.clone() for _ in range(config.num_clients)]
        for t in range(config.rounds):
            for i in range(config.num_clients):
                client_local_train(
                    models[i], clients[i], None, None, 0.0, config.tau,
                    config.local_epochs, config.batch_size, config.client_lr,
                    RngStream(config.seed, "client-train", client=i, round_index=t),
                )
            weights = np.array([c.num_train for c in clients], dtype=np.float64)
            global_model = average_models(models, weights)
            models = [global_model.clone() for _ in range(config.num_clients)]

        for a, b in zip(result.models, models):
            assert np.abs(a.flatten() - b.flatten()).max() <= 1e-9

    def test_pfl_finetune_freezes_extractor_and_improves_or_ties(self):
        config = self.gfl_config(rounds=2, mode="pfl", finetune_epochs=5, finetune_lr=0.01)
        result = execute(config)
        assert result.personalization is not None
        assert len(result.personalization["per_client_top1"]) == config.num_clients

    def test_zero_finetune_epochs_equals_global_accuracy(self):
        config = self.gfl_config(rounds=2)
        result = execute(config)
        extractors_before = [m.weights[0].copy() for m in result.models]
        _, clients = build_clients(
            config,
            generate_hierarchical_dataset(
                config.superclusters, config.classes_per_super, config.samples_per_class,
                config.input_dim, config.sigma_class, config.sigma_super, config.seed,
            ),
        )
        personalization = run_pfl_finetune(result, clients, finetune_epochs=0, lr=0.01)
        final = result.history[-1]
        for best, base in zip(personalization["per_client_top1"], final.per_client_top1):
            assert best == pytest.approx(base, abs=1e-12)
        for model, before in zip(result.models, extractors_before):
            assert np.array_equal(model.weights[0], before)

    def test_classifier_finetune_descends_on_train_split(self):
        config = self.gfl_config(rounds=1)
        result = execute(config)
        dataset = generate_hierarchical_dataset(
            config.superclusters, config.classes_per_super, config.samples_per_class,
            config.input_dim, config.sigma_class, config.sigma_super, config.seed,
        )
        _, clients = build_clients(config, dataset)
        good = total = 0
        for model, client in zip(result.models, clients):
            tuned = model.clone()
            feats = forward_features(tuned, client.train_inputs)
            losses = []
            for _ in range(10):
                logits = feats @ tuned.clf_weight + tuned.clf_bias
                loss, grad = softmax_cross_entropy(logits, client.train_labels)
                losses.append(loss)
                tuned.clf_weight = tuned.clf_weight - 0.001 * (feats.T @ grad)
                tuned.clf_bias = tuned.clf_bias - 0.001 * grad.sum(axis=0)
            total += 1
            good += all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert good / total >= 0.95
