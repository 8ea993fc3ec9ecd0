"""FedAvg, prototypes, the unlearning loop, and baseline behaviors."""

import numpy as np
import pytest

from fucrt.config import ExperimentConfig, build_datasets, build_partition
from fucrt.data import LabeledDataset, relabel_for_unlearning
from fucrt.errors import ConfigurationError, DiagnosticsWarning, ProtocolError
from fucrt.evaluation import group_metrics, overall_accuracy
from fucrt.federation import (
    PrototypeBank,
    aggregate_prototypes,
    empty_bank,
    fedavg,
    local_prototypes,
    pretrain,
    run_baseline,
    run_fucrt,
)
from fucrt.losses import LossConfig, l2_normalize
from fucrt.nn import ModelDims, ModelParams, backward, forward, init_params, sgd_step
from fucrt.rng import stream
from fucrt.tcs import aggregate_global_ts, assign_transformation_class, local_ts

SMALL = dict(
    classes=4,
    samples_per_class=30,
    test_samples_per_class=30,
    input_dim=8,
    hidden_dims=(16,),
    rep_dim=8,
    clients=3,
    blob_far=3.0,
    blob_near=1.5,
    blob_spread=0.3,
    pretrain_rounds=8,
    unlearn_rounds=5,
    learning_rate=0.1,
    batch_size=16,
    forget_classes=(0,),
)


def small_config(**overrides):
    return ExperimentConfig(**{**SMALL, **overrides})


def prepared(cfg):
    train, test = build_datasets(cfg)
    partition = build_partition(cfg, train)
    return train, test, partition


def params_equal(a: ModelParams, b: ModelParams, tol=0.0) -> bool:
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        if tol == 0.0:
            if wa.tobytes() != wb.tobytes() or ba.tobytes() != bb.tobytes():
                return False
        else:
            if np.max(np.abs(wa - wb)) > tol or np.max(np.abs(ba - bb)) > tol:
                return False
    return True


class TestFedavg:
    def test_identical_inputs_are_idempotent(self):
        model = init_params(ModelDims(3, (4,), 4, 3), 0)
        out = fedavg([model, model.copy(), model.copy()], [5, 7, 3])
        assert params_equal(out, model, tol=1e-15)

    def test_hand_weighted_mean(self):
        dims = ModelDims(1, (), 1, 1)
        def scalar_model(v):
            return ModelParams(
                layers=[(np.array([[v]]), np.array([0.0])), (np.array([[0.0]]), np.array([0.0]))],
                encoder_depth=1,
                dims=dims,
            )
        out = fedavg([scalar_model(1.0), scalar_model(3.0)], [10, 30])
        assert out.layers[0][0][0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_equal_weights_reduce_to_plain_mean(self):
        rng = np.random.default_rng(1)
        models = [init_params(ModelDims(3, (4,), 4, 3), s) for s in (1, 2, 3)]
        out = fedavg(models, [7, 7, 7])
        for i in range(len(out.layers)):
            mean_w = np.mean([m.layers[i][0] for m in models], axis=0)
            assert np.allclose(out.layers[i][0], mean_w, atol=1e-14)

    def test_output_in_convex_hull_elementwise(self):
        rng = np.random.default_rng(2)
        models = [init_params(ModelDims(3, (4,), 4, 3), s) for s in (4, 5, 6)]
        out = fedavg(models, [1, 2, 3])
        for i in range(len(out.layers)):
            stack = np.stack([m.layers[i][0] for m in models])
            assert np.all(out.layers[i][0] <= stack.max(axis=0) + 1e-12)
            assert np.all(out.layers[i][0] >= stack.min(axis=0) - 1e-12)

    def test_shape_mismatch_raises(self):
        a = init_params(ModelDims(3, (4,), 4, 3), 0)
        b = init_params(ModelDims(3, (5,), 4, 3), 0)
        with pytest.raises(ConfigurationError):
            fedavg([a, b], [1, 1])


class TestLocalPrototypes:
    def test_single_sample_class_is_its_normalized_representation(self):
        cfg = small_config()
        train, _, _ = prepared(cfg)
        model = init_params(cfg.model_dims(), 3)
        one = train.subset(np.array([0]))
        vectors, present = local_prototypes(model, one)
        rep = forward(model, one.features).representations
        zhat, _ = l2_normalize(rep)
        assert present[one.labels[0]]
        assert np.allclose(vectors[one.labels[0]], zhat[0], atol=1e-15)

    def test_diametrically_opposed_reps_fall_back_with_warning(self):
        dims = ModelDims(2, (), 2, 2)
        # Identity encoder: representation equals the input.
        model = ModelParams(
            layers=[(np.eye(2), np.zeros(2)), (np.eye(2), np.zeros(2))],
            encoder_depth=1,
            dims=dims,
        )
        ds = LabeledDataset(
            features=np.array([[1.0, 0.0], [-1.0, 0.0]]),
            labels=np.array([0, 0]),
            class_count=2,
        )
        with pytest.warns(DiagnosticsWarning, match="degenerate"):
            vectors, present = local_prototypes(model, ds)
        assert present[0] and not present[1]
        assert np.allclose(vectors[0], [1.0, 0.0])

    def test_matches_brute_force_per_class_mean(self):
        cfg = small_config()
        train, _, _ = prepared(cfg)
        model = init_params(cfg.model_dims(), 9)
        vectors, present = local_prototypes(model, train)
        reps = forward(model, train.features).representations
        zhat, _ = l2_normalize(reps)
        for c in range(cfg.classes):
            rows = [i for i in range(len(train)) if train.labels[i] == c]
            if not rows:
                assert not present[c]
                continue
            mean = sum(zhat[i] for i in rows) / len(rows)
            mean = mean / np.linalg.norm(mean)
            assert np.max(np.abs(vectors[c] - mean)) < 1e-12


class TestAggregatePrototypes:
    def test_two_orthogonal_clients_average_and_renormalize(self):
        banks = [
            (np.array([[1.0, 0.0]]), np.array([True])),
            (np.array([[0.0, 1.0]]), np.array([True])),
        ]
        out = aggregate_prototypes(banks, empty_bank(1, 2))
        assert np.allclose(out.vectors[0], [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-12)
        assert np.allclose(np.abs(out.vectors[0]), [0.7071, 0.7071], atol=1e-4)

    def test_single_client_bank_is_unchanged(self):
        rng = np.random.default_rng(3)
        vectors = rng.normal(size=(3, 4))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        present = np.array([True, False, True])
        out = aggregate_prototypes([(vectors, present)], empty_bank(3, 4))
        assert np.allclose(out.vectors[0], vectors[0], atol=1e-12)
        assert np.allclose(out.vectors[2], vectors[2], atol=1e-12)
        assert not out.present[1]

    def test_missing_class_carries_previous_vector_and_flags_absent(self):
        previous = PrototypeBank(
            vectors=np.array([[0.0, 1.0], [1.0, 0.0]]),
            present=np.array([True, True]),
            round_tag=4,
        )
        banks = [(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([True, False]))]
        out = aggregate_prototypes(banks, previous, round_tag=5)
        assert out.present[0] and not out.present[1]
        assert np.allclose(out.vectors[1], [1.0, 0.0])
        assert out.round_tag == 5


class TestPretrain:
    def test_zero_rounds_returns_initial_params(self):
        cfg = small_config(pretrain_rounds=0)
        train, test, partition = prepared(cfg)
        result = pretrain(cfg, train, test, partition)
        from fucrt.rng import derive_seed
        assert params_equal(result.model, init_params(cfg.model_dims(), derive_seed(cfg.seed, "init")))
        assert result.records == []

    def test_determinism(self):
        cfg = small_config()
        train, test, partition = prepared(cfg)
        a = pretrain(cfg, train, test, partition)
        b = pretrain(cfg, train, test, partition)
        assert params_equal(a.model, b.model)

    def test_well_separated_blobs_reach_95_percent(self):
        cfg = ExperimentConfig(
            classes=10,
            samples_per_class=200,
            test_samples_per_class=200,
            input_dim=16,
            hidden_dims=(64,),
            rep_dim=16,
            clients=8,
            partition="iid",
            blob_far=3.0,
            blob_near=1.5,
            blob_spread=0.3,
            pretrain_rounds=30,
            learning_rate=0.1,
            batch_size=16,
            seed=0,
        )
        train, test, partition = prepared(cfg)
        result = pretrain(cfg, train, test, partition)
        assert overall_accuracy(result.model, test) >= 95.0

    def test_thread_pool_matches_sequential(self):
        cfg = small_config(threads=1)
        train, test, partition = prepared(cfg)
        seq = pretrain(cfg, train, test, partition)
        par = pretrain(small_config(threads=4), train, test, partition)
        assert params_equal(seq.model, par.model)


class TestRunFucrt:
    def test_single_round_budget_returns_origin(self):
        cfg = small_config(unlearn_rounds=1)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        result = run_fucrt(origin, cfg, train, test, partition)
        assert params_equal(result.model, origin)
        assert len(result.records) == 1
        assert result.records[0].round == 0
        assert result.global_ts is not None

    def test_zero_contrastive_matches_independent_relabel_ce_loop(self):
        cfg = small_config(lambda1=0.0, lambda2=0.0, unlearn_rounds=4)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        result = run_fucrt(origin, cfg, train, test, partition)

        # Independently coded loop: TCS once on the origin model, per-round
        # reassignment against the incoming global model, plain CE epochs,
        # sample-weighted averaging.
        forget = {0}
        thresholds = cfg.ts_thresholds()
        client_data = [train.subset(ix) for ix in partition.client_indices]
        reports = {}
        for ds in client_data:
            feats = ds.features[ds.labels == 0]
            if len(feats):
                ts = local_ts(origin, feats, 0, forget, thresholds)
                if ts is not None:
                    reports.setdefault(0, []).append(ts)
        gts = aggregate_global_ts(reports, forget)

        def assignments_for(model, ds):
            originals = ds.original_labels if ds.original_labels is not None else ds.labels
            rows = np.flatnonzero(np.isin(originals, [0]))
            probs = forward(model, ds.features[rows]).probabilities
            return {
                int(i): assign_transformation_class(probs[j], int(originals[i]), gts.per_class[0])
                for j, i in enumerate(rows)
            }

        states = []
        for ds in client_data:
            if np.any(ds.labels == 0):
                ds = relabel_for_unlearning(ds, assignments_for(origin, ds), forget)
            states.append(ds)

        global_model = origin.copy()
        ce_cfg = LossConfig(0.0, 0.0, cfg.tau_t)
        for r in range(1, cfg.unlearn_rounds):
            locals_, weights = [], []
            for k, ds in enumerate(states):
                if ds.original_labels is not None:
                    ds = relabel_for_unlearning(ds, assignments_for(global_model, ds), forget)
                    states[k] = ds
                local = global_model.copy()
                rng = stream(cfg.seed, "unlearn", k, r)
                order = rng.permutation(len(ds))
                for s in range(0, len(order), cfg.batch_size):
                    rows = order[s : s + cfg.batch_size]
                    _, grads = backward(local, ds.features[rows], ds.labels[rows], ce_cfg)
                    local = sgd_step(local, grads, cfg.learning_rate)
                locals_.append(local)
                weights.append(len(ds))
            total = sum(weights)
            layers = []
            for i in range(len(global_model.layers)):
                w = sum((weights[k] / total) * locals_[k].layers[i][0] for k in range(len(locals_)))
                b = sum((weights[k] / total) * locals_[k].layers[i][1] for k in range(len(locals_)))
                layers.append((w, b))
            global_model = ModelParams(
                layers=layers, encoder_depth=global_model.encoder_depth, dims=global_model.dims
            )
        assert params_equal(result.model, global_model, tol=1e-12)

    def test_erases_target_class_on_small_benchmark(self):
        cfg = small_config(unlearn_rounds=12, samples_per_class=60, test_samples_per_class=60)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        result = run_fucrt(origin, cfg, train, test, partition)
        unl, rem = group_metrics(result.model, test, {0})
        assert unl.accuracy == 0.0
        assert rem.accuracy > 80.0

    def test_assigned_classes_never_in_forget_set(self):
        cfg = small_config(forget_classes=(0, 1), unlearn_rounds=3)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        result = run_fucrt(origin, cfg, train, test, partition)
        for u, candidates in result.global_ts.per_class.items():
            assert u in (0, 1)
            assert all(c not in (0, 1) for c in candidates)

    def test_support_gate_too_high_raises_protocol_error(self):
        cfg = small_config(tau_s=1000)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        with pytest.raises(ProtocolError, match="tau_s"):
            run_fucrt(origin, cfg, train, test, partition)

    def test_random_label_ablation_uses_fixed_remaining_class(self):
        cfg = small_config(disable_tcs=True, unlearn_rounds=3)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        result = run_fucrt(origin, cfg, train, test, partition)
        assert result.ts_strategy == "random"
        (candidates,) = result.global_ts.per_class.values()
        assert len(candidates) == 1
        assert candidates[0] not in (0,)
        again = run_fucrt(origin, cfg, train, test, partition)
        assert again.global_ts.per_class == result.global_ts.per_class

    def test_thread_pool_matches_sequential(self):
        cfg = small_config(unlearn_rounds=4)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        seq = run_fucrt(origin, cfg, train, test, partition)
        par = run_fucrt(origin, small_config(unlearn_rounds=4, threads=4), train, test, partition)
        assert params_equal(seq.model, par.model)

    def test_comm_accounting_matches_checkpoint_and_prototype_sizes(self):
        cfg = small_config(unlearn_rounds=3)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        result = run_fucrt(origin, cfg, train, test, partition)
        from fucrt.nn import serialize_params

        model_bytes = len(serialize_params(origin))
        proto_bytes = cfg.classes * cfg.rep_dim * 8
        for rec in result.records:
            assert rec.comm_per_client_bytes == model_bytes + proto_bytes
            assert rec.comm_total_bytes == (model_bytes + proto_bytes) * cfg.clients


class TestBaselines:
    def test_fine_tune_zero_rounds_returns_origin(self):
        cfg = small_config(unlearn_rounds=1)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        result = run_baseline("fine_tune", origin, cfg, train, test, partition)
        assert params_equal(result.model, origin)

    def test_from_scratch_with_empty_forget_set_equals_pretrain(self):
        cfg = small_config(forget_classes=(), pretrain_rounds=4, unlearn_rounds=5)
        train, test, partition = prepared(cfg)
        pre = pretrain(cfg, train, test, partition)
        scratch = run_baseline("from_scratch", init_params(cfg.model_dims(), 123), cfg,
                               train, test, partition)
        assert params_equal(pre.model, scratch.model)

    def test_from_scratch_ignores_origin_weights(self):
        cfg = small_config(unlearn_rounds=4)
        train, test, partition = prepared(cfg)
        a = run_baseline("from_scratch", init_params(cfg.model_dims(), 1), cfg, train, test, partition)
        b = run_baseline("from_scratch", init_params(cfg.model_dims(), 2), cfg, train, test, partition)
        assert params_equal(a.model, b.model)

    def test_gradient_ascent_erases_but_damages_remaining(self):
        cfg = small_config(
            samples_per_class=60, test_samples_per_class=60, unlearn_rounds=11,
            pretrain_rounds=25,
        )
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        pre_unl, pre_rem = group_metrics(origin, test, {0})
        result = run_baseline("gradient_ascent", origin, cfg, train, test, partition)
        unl, rem = group_metrics(result.model, test, {0})
        assert unl.accuracy == 0.0
        assert rem.accuracy < pre_rem.accuracy - 10.0

    def test_unknown_baseline_rejected(self):
        cfg = small_config()
        train, test, partition = prepared(cfg)
        with pytest.raises(ConfigurationError):
            run_baseline("magic", init_params(cfg.model_dims(), 0), cfg, train, test, partition)


class TestPerBatchReassignment:
    def test_flag_runs_and_is_deterministic(self):
        cfg = small_config(unlearn_rounds=4, reassign_per_batch=True)
        train, test, partition = prepared(cfg)
        origin = pretrain(cfg, train, test, partition).model
        a = run_fucrt(origin, cfg, train, test, partition)
        b = run_fucrt(origin, cfg, train, test, partition)
        assert params_equal(a.model, b.model)
        unl, _ = group_metrics(a.model, test, {0})
        assert unl.accuracy <= 50.0
