"""Acceptance suite: one test per criterion, tolerances pinned, one line printed each.

Criteria 5 and 6 run the hierarchical desk benchmark (2 superclusters x 3
classes, D_in = 16, d = 16, N = 10, Dir(0.5)) end to end; everything else is
property-based on small seeded instances.
"""

import time

import numpy as np

from protofed.baselines import (
    AlignFedStrategy,
    fedtgp_objective,
    generate_hypersphere_prototypes,
)
from protofed.cli import build_clients, execute
from protofed.config import ExperimentConfig
from protofed.data import (
    PartitionSpec,
    dirichlet_partition,
    generate_hierarchical_dataset,
    label_entropy,
)
from protofed.metrics import metrics_csv_text, semantic_structure_score
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
    sample_participants,
)
from protofed.rng import RngStream
from protofed.text import (
    build_frozen_encoder,
    build_prompt_bank,
    encode_text_prototypes,
    server_alignment_loss,
    train_prompts,
)


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def desk_benchmark_config(method: str, seed: int, rounds: int, **kw) -> ExperimentConfig:
    base = dict(
        method=method, seed=seed, rounds=rounds, num_clients=10,
        superclusters=2, classes_per_super=3, samples_per_class=40,
        input_dim=16, feature_dim=16, sigma_super=2.0, sigma_class=0.6,
        alpha=0.5, holdout_per_class=10, local_epochs=5, batch_size=32,
        architectures=[[32], [48], [64, 32]],
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst = {"ce": 0.0, "align": 0.0, "server": 0.0, "client": 0.0, "tgp": 0.0}

    for seed in range(20):
        # softmax cross-entropy
        rng = RngStream(seed, "acc-ce")
        logits = rng.matrix(4, 4)
        labels = np.array([0, 1, 2, 3])
        _, grad = softmax_cross_entropy(logits, labels)
        worst["ce"] = max(worst["ce"], finite_difference_check(
            lambda x: softmax_cross_entropy(x, labels)[0], logits, grad, 1e-4
        ))

        # client alignment term (contrastive through the cosine). Instances are
        # screened to the FD-measurable regime: at tau = 0.07 a saturated softmax
        # has gradient coordinates ~e^{-cos_gap/tau} below central-difference
        # resolution, so candidates with min softmax weight < 1e-5 are redrawn.
        candidate = seed
        while True:
            rng = RngStream(candidate, "acc-align")
            anchor = rng.matrix(1, 8).ravel()
            targets = rng.matrix(4, 8)
            cos = targets @ anchor / (
                np.linalg.norm(targets, axis=1) * np.linalg.norm(anchor)
            )
            weights = np.exp(cos / 0.07 - (cos / 0.07).max())
            if (weights / weights.sum()).min() >= 1e-5:
                break
            candidate += 100
        positive = seed % 4
        _, g_anchor, g_targets = contrastive_alignment(anchor, targets, positive, 0.07)
        worst["align"] = max(worst["align"], finite_difference_check(
            lambda x: contrastive_alignment(x, targets, positive, 0.07)[0], anchor, g_anchor
        ))
        worst["align"] = max(worst["align"], finite_difference_check(
            lambda x: contrastive_alignment(anchor, x, positive, 0.07)[0], targets, g_targets
        ))

        # server loss through attention + MLP into the prefix rows
        enc = build_frozen_encoder(6, 6, 8, 128, seed=seed)
        names = ["ca", "cb", "cc"]
        descs = {n: [f"{n} tone hue swirl {j} mix" for j in range(2)] for n in names}
        bank = build_prompt_bank(names, descs, 2, 2, enc)
        img = RngStream(seed, "acc-img").matrix(3, 6)
        mask = np.ones(3, dtype=bool)
        stepped, _ = train_prompts(bank, enc, img, mask, 0.5, lr=1.0, epochs=1)
        for c in range(3):
            analytic = bank.prefixes[c] - stepped.prefixes[c]

            def server_loss_at(flat, cls=c):
                probe = bank.clone()
                probe.prefixes[cls] = flat.reshape(bank.prefixes[cls].shape)
                protos = encode_text_prototypes(probe, enc)
                return server_alignment_loss(protos.matrix, img, mask, 0.5)[0]

            worst["server"] = max(worst["server"], finite_difference_check(
                server_loss_at, bank.prefixes[c].ravel().copy(), analytic.ravel(), 1e-5
            ))

        # total client objective through the full MLP
        rng = RngStream(seed, "acc-client")
        x = rng.matrix(5, 5)
        y = np.array([0, 1, 2, 0, 1])
        protos = rng.matrix(3, 4)
        model = init_model(ArchitectureSpec((6,), "tanh", 4), 5, 3, RngStream(seed, "acc-m"))
        lam, tau = 2.0, 0.5

        def client_loss_at(flat):
            probe = model.clone()
            probe.load_flat(flat)
            feats = forward_features(probe, x)
            ce, _ = softmax_cross_entropy(feats @ probe.clf_weight + probe.clf_bias, y)
            total = ce
            for s in range(5):
                term, _, _ = contrastive_alignment(feats[s], protos, int(y[s]), tau)
                total += lam * term / 5
            return total

        from protofed.data import ClientDataset

        client = ClientDataset(
            0, x, y, x, y, np.bincount(y, minlength=3),
        )
        stepped_model = model.clone()
        client_local_train(
            stepped_model, client, protos, np.ones(3, dtype=bool), lam, tau,
            epochs=1, batch_size=5, lr=1.0, rng=RngStream(seed, "acc-t"),
        )
        analytic = model.flatten() - stepped_model.flatten()
        worst["client"] = max(worst["client"], finite_difference_check(
            client_loss_at, model.flatten(), analytic, 1e-5
        ))

        # FedTGP-lite server objective
        rng = RngStream(seed, "acc-tgp")
        protos_t = rng.matrix(3, 4)
        centers = rng.matrix(3, 4)
        present = np.arange(3)
        _, grad_t = fedtgp_objective(protos_t, centers, present, margin=2.0)
        worst["tgp"] = max(worst["tgp"], finite_difference_check(
            lambda p: fedtgp_objective(p, centers, present, 2.0)[0], protos_t, grad_t, 1e-5
        ))

    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 60.0
    report(1, ok, f"max rel errors {({k: float(f'{v:.2e}') for k, v in worst.items()})}, "
                  f"{elapsed:.1f}s (< 60s)")


def test_criterion_2_prototype_oracles():
    worst_local = 0.0
    config = desk_benchmark_config("fedtsp", 0, 1)
    dataset = generate_hierarchical_dataset(2, 3, 40, 16, 0.6, 2.0, 0)
    _, clients = build_clients(config, dataset)
    for i, client in enumerate(clients):
        model = init_model(
            ArchitectureSpec((32,), "relu", 16), 16, 6, RngStream(0, "model-init", client=i)
        )
        feats = forward_features(model, client.train_inputs)
        for c, vec, count in compute_local_prototypes(model, client):
            brute = feats[client.train_labels == c].mean(axis=0)
            worst_local = max(worst_local, float(np.abs(vec - brute).max()))

    worst_pool = 0.0
    for seed in range(10):
        rng = RngStream(seed, "acc-pool")
        bank = PrototypeBank.empty(3, 5)
        uplinks, pooled = [], {c: [] for c in range(3)}
        for _ in range(4):
            entries = []
            for c in range(3):
                n = 1 + RngStream(seed, "acc-pool-n", c).integer(7)
                feats = rng.matrix(n, 5)
                pooled[c].append(feats)
                entries.append((c, feats.mean(axis=0), n))
            uplinks.append(entries)
        aggregate_global_prototypes(uplinks, bank, 0)
        for c in range(3):
            brute = np.concatenate(pooled[c]).mean(axis=0)
            worst_pool = max(worst_pool, float(np.abs(bank.matrix[c] - brute).max()))

    ok = worst_local <= 1e-12 and worst_pool <= 1e-9
    report(2, ok, f"local-mean dev {worst_local:.2e} (<= 1e-12), "
                  f"pooled-mean dev {worst_pool:.2e} (<= 1e-9)")


def test_criterion_3_frozen_contract():
    config = desk_benchmark_config("fedtsp", 1, 5, server_epochs=20)
    dataset = generate_hierarchical_dataset(2, 3, 40, 16, 0.6, 2.0, 1)
    from protofed.cli import _build_text_stack

    bank, encoder = _build_text_stack(config, dataset)
    encoder_before = encoder.to_bytes()
    tails_before = [[seq[config.prompt_len:].copy() for seq in seqs] for seqs in bank.embedded]

    from protofed.cli import build_models
    from protofed.protocol import run_fedtsp

    holdout, clients = build_clients(config, dataset)
    models = build_models(config, dataset.input_dim, dataset.num_classes)
    result = run_fedtsp(config, clients, models, holdout, bank, encoder,
                        dataset.hierarchy, dataset.class_names)
    final_bank = result.extras["prompt_bank"]

    frozen = encoder.to_bytes() == encoder_before
    tails = all(
        np.array_equal(seq[config.prompt_len:], tails_before[c][j])
        for c, seqs in enumerate(final_bank.embedded)
        for j, seq in enumerate(seqs)
    )
    prefixes_moved = any(
        not np.array_equal(a, b) for a, b in zip(bank.prefixes, final_bank.prefixes)
    )
    ok = frozen and tails and prefixes_moved
    report(3, ok, f"encoder bytes identical={frozen}, non-prefix rows identical={tails}, "
                  f"prefixes trained={prefixes_moved} after 5 rounds with E_s=20")


def test_criterion_4_closed_form_server_loss():
    worst = 0.0
    for c in (2, 4, 8):
        for tau in (0.07, 1.0):
            protos = np.eye(8)[:c].astype(float)
            loss, _ = server_alignment_loss(protos, protos, np.ones(c, dtype=bool), tau)
            expected = np.log(1.0 + (c - 1) * np.exp(-1.0 / tau))
            worst = max(worst, abs(loss - expected))
    ok = worst <= 1e-9
    report(4, ok, f"max |L_S - ln(1+(C-1)e^(-1/tau))| = {worst:.2e} (<= 1e-9) "
                  f"for C in {{2,4,8}}, tau in {{0.07,1.0}}")


def test_criterion_5_semantic_structure():
    start = time.perf_counter()
    gaps = []
    for seed in range(5):
        result = execute(desk_benchmark_config("fedtsp", seed, 30))
        gaps.append(semantic_structure_score(
            result.broadcast_prototypes, result.hierarchy
        ).gap)
    hits = sum(g >= 0.1 for g in gaps)

    align_gaps = []
    for seed in range(5):
        config = desk_benchmark_config("alignfed", seed, 30)
        strategy = AlignFedStrategy(config, 6)
        align_gaps.append(semantic_structure_score(
            strategy.prototypes, [0, 0, 0, 1, 1, 1]
        ).gap)
    align_ok = all(abs(g) <= 0.05 for g in align_gaps)

    elapsed = time.perf_counter() - start
    ok = hits >= 4 and align_ok and elapsed < 180.0
    report(5, ok, f"text-prototype gap >= 0.1 in {hits}/5 seeds "
                  f"(gaps {[float(f'{g:.3f}') for g in gaps]}); alignfed bank gaps "
                  f"{[float(f'{g:.4f}') for g in align_gaps]} within +-0.05; "
                  f"{elapsed:.0f}s (< 180s)")


def test_criterion_6_directional_accuracy():
    wins_local = wins_proto = 0
    details = []
    max_run = 0.0
    for seed in range(3):
        best = {}
        for method in ("fedtsp", "local", "fedproto"):
            t0 = time.perf_counter()
            best[method] = execute(desk_benchmark_config(method, seed, 50)).best_mean_local_top1
            max_run = max(max_run, time.perf_counter() - t0)
        wins_local += best["fedtsp"] >= best["local"]
        wins_proto += best["fedtsp"] >= best["fedproto"]
        details.append(f"s{seed}: {best['fedtsp']:.3f}/{best['local']:.3f}/{best['fedproto']:.3f}")
    ok = wins_local >= 2 and wins_proto >= 2 and max_run < 120.0
    report(6, ok, f">= local in {wins_local}/3, >= fedproto in {wins_proto}/3 "
                  f"({'; '.join(details)}); slowest run {max_run:.0f}s (< 120s)")


def test_criterion_7_reductions():
    small = dict(num_clients=5, samples_per_class=30, holdout_per_class=4,
                 local_epochs=2, server_epochs=4)
    reduced = execute(desk_benchmark_config(
        "fedtsp", 2, 5, lambda_=0.0, prompt_len=0, **{**small, "server_epochs": 0}
    ))
    local = execute(desk_benchmark_config("local", 2, 5, **small))
    bitwise = all(
        np.array_equal(a.flatten(), b.flatten())
        for a, b in zip(reduced.models, local.models)
    )

    config = desk_benchmark_config(
        "fedtsp", 3, 5, mode="gfl", architectures=[[24]], lambda_=0.0,
        **{**small, "server_epochs": 0},
    )
    result = execute(config)
    dataset = generate_hierarchical_dataset(2, 3, 30, 16, 0.6, 2.0, 3)
    _, clients = build_clients(config, dataset)
    shared = init_model(
        ArchitectureSpec((24,), "relu", 16), 16, 6, RngStream(3, "model-init", client=0)
    )
    models = [shared.clone() for _ in range(5)]
    for t in range(5):
        for i in range(5):
            client_local_train(
                models[i], clients[i], None, None, 0.0, config.tau,
                config.local_epochs, config.batch_size, config.client_lr,
                RngStream(3, "client-train", client=i, round_index=t),
            )
        weights = np.array([c.num_train for c in clients], dtype=np.float64)
        global_model = average_models(models, weights)
        models = [global_model.clone() for _ in range(5)]
    fedavg_dist = max(
        float(np.abs(a.flatten() - b.flatten()).max())
        for a, b in zip(result.models, models)
    )
    ok = bitwise and fedavg_dist <= 1e-9
    report(7, ok, f"disabled fedtsp bit-identical to local = {bitwise}; "
                  f"gfl vs independent fedavg max param distance {fedavg_dist:.2e} (<= 1e-9)")


def test_criterion_8_determinism_and_scheduling():
    config = desk_benchmark_config("fedtsp", 4, 3, num_clients=6, samples_per_class=30,
                                   holdout_per_class=4, local_epochs=2, server_epochs=4)
    a = metrics_csv_text(execute(config).history)
    b = metrics_csv_text(execute(config).history)
    threaded = desk_benchmark_config("fedtsp", 4, 3, num_clients=6, samples_per_class=30,
                                     holdout_per_class=4, local_epochs=2, server_epochs=4,
                                     threads=4)
    c = metrics_csv_text(execute(threaded).history)
    ok = a == b == c
    report(8, ok, f"rerun byte-identical={a == b}, 4-thread run byte-identical={a == c}")


def test_criterion_9_communication_accounting():
    config = desk_benchmark_config("fedtsp", 5, 4, participation_rate=0.4)
    result = execute(config)
    dataset = generate_hierarchical_dataset(2, 3, 40, 16, 0.6, 2.0, 5)
    _, clients = build_clients(config, dataset)
    c_classes, d = 6, 16
    present = [len(cl.present_classes()) for cl in clients]

    down_ok = True
    up_ok = result.history[0].uplink_floats == sum(p * d for p in present)
    for t in range(config.rounds):
        participants = sample_participants(
            10, 0.4, t, RngStream(5, "participation", round_index=t)
        )
        row = result.history[t + 1]
        down_ok &= row.downlink_floats == c_classes * d * len(participants)
        up_ok &= row.uplink_floats == sum(present[i] * d for i in participants)
    ok = down_ok and up_ok
    report(9, ok, f"downlink = C*d per participant-round (exact): {down_ok}; "
                  f"uplink = sum(present)*d vs independent recount: {up_ok}")


def test_criterion_10_heterogeneity_knob():
    dataset = generate_hierarchical_dataset(2, 3, 200, 8, 0.6, 2.0, 0)
    means = {}
    for alpha in (1000.0, 1.0, 0.1):
        vals = []
        for seed in range(10):
            clients = dirichlet_partition(dataset, PartitionSpec(alpha, 20, seed))
            for c in clients:
                labels = np.concatenate([c.train_labels, c.test_labels])
                vals.append(label_entropy(np.bincount(labels, minlength=6)))
        means[alpha] = float(np.mean(vals))
    ok = means[1000.0] > means[1.0] > means[0.1]
    report(10, ok, f"mean client label entropy {means[1000.0]:.3f} (a=1000) > "
                   f"{means[1.0]:.3f} (a=1) > {means[0.1]:.3f} (a=0.1)")


def test_criterion_11_hypersphere_generator():
    two = generate_hypersphere_prototypes(2, 16, RngStream(0, "acc-hs"))
    antipodal_err = abs(float(two[0] @ two[1]) + 1.0)

    worst_gap = -np.inf
    for c in (3, 4, 6, 8, 16):
        for seed in range(3):
            x = generate_hypersphere_prototypes(c, 16, RngStream(seed, "acc-hs"))
            sims = x @ x.T
            np.fill_diagonal(sims, -2.0)
            worst_gap = max(worst_gap, float(sims.max()) + 1.0 / (c - 1))
    ok = antipodal_err <= 1e-6 and worst_gap <= 1e-3
    report(11, ok, f"C=2 cosine -1 +- {antipodal_err:.1e} (<= 1e-6); "
                   f"worst max-cosine excess over simplex bound {worst_gap:.1e} (<= 1e-3)")
