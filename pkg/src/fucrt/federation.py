"""Round orchestration: FedAvg, prototypes, the unlearning loop, baselines.

The server loop is a synchronous round barrier; client epochs are pure
functions of (global model, client data, derived RNG stream), so results
are identical whether clients run sequentially or on a thread pool.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import LabeledDataset, Partition, relabel_for_unlearning
from .errors import ConfigurationError, DiagnosticsWarning, NumericError
from .evaluation import group_metrics, overall_accuracy
from .losses import (
    LossConfig,
    cross_entropy_from_logits,
    global_contrastive,
    l2_normalize,
    local_contrastive,
)
from .nn import (
    Gradients,
    ModelParams,
    _loss_and_grads,
    forward,
    init_params,
    serialize_params,
    sgd_step,
)
from .rng import derive_seed, stream
from .tcs import GlobalTS, aggregate_global_ts, assign_transformation_class, local_ts


@dataclass
class PrototypeBank:
    """Per-class mean representations with presence flags."""

    vectors: np.ndarray  # C x rep_dim, L2-normalized where present
    present: np.ndarray  # bool per class
    round_tag: int = 0


def empty_bank(class_count: int, rep_dim: int) -> PrototypeBank:
    return PrototypeBank(
        vectors=np.zeros((class_count, rep_dim)),
        present=np.zeros(class_count, dtype=bool),
        round_tag=0,
    )


@dataclass
class ClientState:
    """One simulated client: its (possibly relabeled) local data."""

    client_id: int
    dataset: LabeledDataset
    forget_mask: np.ndarray  # original label in the forget set
    has_unlearning: bool


@dataclass
class RoundRecord:
    round: int
    losses: dict[str, float]
    metrics: dict[str, float | None]
    client_sample_counts: list[int]
    duration_ms: float
    comm_per_client_bytes: int
    comm_total_bytes: int

    def as_json(self) -> dict:
        row: dict = {"round": self.round}
        row["loss"] = self.losses.get("total")
        row["loss_ce"] = self.losses.get("ce")
        row["loss_local"] = self.losses.get("local")
        row["loss_global"] = self.losses.get("global")
        row.update(self.metrics)
        row["client_sample_counts"] = list(self.client_sample_counts)
        row["duration_ms"] = self.duration_ms
        row["comm_per_client_bytes"] = self.comm_per_client_bytes
        row["comm_total_bytes"] = self.comm_total_bytes
        return row


@dataclass
class RunResult:
    model: ModelParams
    records: list[RoundRecord]
    global_ts: GlobalTS | None = None
    ts_strategy: str = "none"  # tcs | random | none


def fedavg(models: list[ModelParams], weights: list[float]) -> ModelParams:
    """Sample-count-weighted elementwise mean, fixed summation order."""
    if not models:
        raise ConfigurationError("fedavg needs at least one model")
    if len(models) != len(weights) or any(w <= 0 for w in weights):
        raise ConfigurationError("fedavg weights must be positive and aligned with models")
    total = float(sum(weights))
    ref = models[0]
    acc = [(np.zeros_like(w), np.zeros_like(b)) for w, b in ref.layers]
    for model, weight in zip(models, weights):
        if len(model.layers) != len(ref.layers):
            raise ConfigurationError("fedavg models have different layer counts")
        frac = weight / total
        for i, (w, b) in enumerate(model.layers):
            if w.shape != ref.layers[i][0].shape or b.shape != ref.layers[i][1].shape:
                raise ConfigurationError(f"fedavg shape mismatch at layer {i}")
            acc[i] = (acc[i][0] + frac * w, acc[i][1] + frac * b)
    return ModelParams(layers=acc, encoder_depth=ref.encoder_depth, dims=ref.dims)


def local_prototypes(model: ModelParams, dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean of L2-normalized representations, re-normalized.

    Near-zero means fall back to the first contributing representation with
    a diagnostics warning. Returns (vectors, presence).
    """
    reps = forward(model, dataset.features).representations
    zhat, _ = l2_normalize(reps)
    vectors = np.zeros((dataset.class_count, zhat.shape[1]))
    present = np.zeros(dataset.class_count, dtype=bool)
    for c in range(dataset.class_count):
        mask = dataset.labels == c
        if not np.any(mask):
            continue
        mean = zhat[mask].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-9:
            warnings.warn(
                f"degenerate zero-mean prototype for class {c}; using first sample direction",
                DiagnosticsWarning,
                stacklevel=2,
            )
            vectors[c] = zhat[mask][0]
        else:
            vectors[c] = mean / norm
        present[c] = True
    return vectors, present


def aggregate_prototypes(
    banks: list[tuple[np.ndarray, np.ndarray]],
    previous: PrototypeBank,
    round_tag: int = 0,
) -> PrototypeBank:
    """Mean over the clients where each class is present, re-normalized.

    Classes no client holds carry the previous global vector forward and are
    flagged absent.
    """
    if not banks:
        raise ConfigurationError("aggregate_prototypes needs at least one client bank")
    class_count, rep_dim = previous.vectors.shape
    vectors = previous.vectors.copy()
    present = np.zeros(class_count, dtype=bool)
    for c in range(class_count):
        contributions = [v[c] for v, p in banks if p[c]]
        if not contributions:
            continue
        mean = np.mean(contributions, axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-9:
            warnings.warn(
                f"degenerate zero-mean global prototype for class {c}; "
                "using first contributing client",
                DiagnosticsWarning,
                stacklevel=2,
            )
            vectors[c] = contributions[0]
        else:
            vectors[c] = mean / norm
        present[c] = True
    return PrototypeBank(vectors=vectors, present=present, round_tag=round_tag)


def _check_finite_params(model: ModelParams, context: str) -> None:
    for i, (w, b) in enumerate(model.layers):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError(f"non-finite model parameters at layer {i} ({context})")


def _clip_gradients(grads: Gradients, max_norm: float) -> Gradients:
    total = 0.0
    for gw, gb in grads.layers:
        total += float(np.sum(gw * gw)) + float(np.sum(gb * gb))
    norm = np.sqrt(total)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return Gradients(layers=[(gw * scale, gb * scale) for gw, gb in grads.layers])


def _epoch(
    model: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    loss_cfg: LossConfig,
    bank: PrototypeBank | None,
    rng: np.random.Generator,
    lr: float,
    batch_size: int,
    ascend: bool = False,
    refresh=None,
    clip_norm: float | None = None,
) -> tuple[ModelParams, dict[str, float], np.ndarray]:
    """One local epoch of shuffled mini-batch SGD; returns final labels too."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    order = rng.permutation(len(labels))
    sums = {"ce": 0.0, "local": 0.0, "global": 0.0, "total": 0.0}
    n_batches = 0
    for start in range(0, len(order), batch_size):
        rows = order[start : start + batch_size]
        if refresh is not None:
            labels = refresh(model)
        parts, grads = _loss_and_grads(model, features[rows], labels[rows], loss_cfg, bank)
        if clip_norm is not None:
            grads = _clip_gradients(grads, clip_norm)
        model = sgd_step(model, grads, -lr if ascend else lr)
        for key in sums:
            sums[key] += parts[key]
        n_batches += 1
    means = {k: (v / n_batches if n_batches else 0.0) for k, v in sums.items()}
    return model, means, labels


def _loss_parts_eval(
    model: ModelParams,
    dataset: LabeledDataset,
    loss_cfg: LossConfig,
    bank: PrototypeBank | None,
) -> dict[str, float]:
    res = forward(model, dataset.features)
    ce = cross_entropy_from_logits(res.logits, dataset.labels)
    local = glob = 0.0
    if loss_cfg.lambda1 > 0.0 or loss_cfg.lambda2 > 0.0:
        zhat, _ = l2_normalize(res.representations)
        if loss_cfg.lambda1 > 0.0:
            local = local_contrastive(zhat, dataset.labels, loss_cfg.tau_t)
        if loss_cfg.lambda2 > 0.0 and bank is not None:
            glob = global_contrastive(zhat, dataset.labels, bank, loss_cfg.tau_t)
    total = ce + loss_cfg.lambda1 * local + loss_cfg.lambda2 * glob
    return {"ce": ce, "local": local, "global": glob, "total": total}


def _round_metrics(
    model: ModelParams, test: LabeledDataset, forget: set[int]
) -> dict[str, float | None]:
    metrics: dict[str, float | None] = {"overall_acc": overall_accuracy(model, test)}
    if forget:
        unl, rem = group_metrics(model, test, forget)
        metrics["unlearning_acc"] = None if unl is None else unl.accuracy
        metrics["remaining_acc"] = None if rem is None else rem.accuracy
    else:
        metrics["unlearning_acc"] = None
        metrics["remaining_acc"] = metrics["overall_acc"]
    return metrics


def _map_clients(task, n_clients: int, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(task, range(n_clients)))
    return [task(k) for k in range(n_clients)]


def _mean_parts(parts_list: list[dict[str, float]]) -> dict[str, float]:
    if not parts_list:
        return {"ce": 0.0, "local": 0.0, "global": 0.0, "total": 0.0}
    return {k: float(np.mean([p[k] for p in parts_list])) for k in parts_list[0]}


def _fedavg_ce_rounds(
    model: ModelParams,
    client_datasets: list[LabeledDataset | None],
    rounds: int,
    config: ExperimentConfig,
    test: LabeledDataset,
    forget: set[int],
    stream_tag: str,
    ascend: bool = False,
    on_round=None,
    clip_norm: float | None = None,
) -> tuple[ModelParams, list[RoundRecord]]:
    loss_cfg = LossConfig(lambda1=0.0, lambda2=0.0, tau_t=config.tau_t)
    model_bytes = len(serialize_params(model))
    records: list[RoundRecord] = []
    active = [k for k, ds in enumerate(client_datasets) if ds is not None and len(ds) > 0]
    if not active:
        raise ConfigurationError("no client has any training data for this run")

    for r in range(1, rounds + 1):
        t0 = time.perf_counter()

        def task(k: int):
            ds = client_datasets[k]
            if ds is None or len(ds) == 0:
                return None
            rng = stream(config.seed, stream_tag, k, r)
            local, parts, _ = _epoch(
                model.copy(),
                ds.features,
                ds.labels,
                loss_cfg,
                None,
                rng,
                config.learning_rate,
                config.batch_size,
                ascend=ascend,
                clip_norm=clip_norm,
            )
            return local, parts, len(ds)

        results = _map_clients(task, len(client_datasets), config.threads)
        done = [res for res in results if res is not None]
        models = [res[0] for res in done]
        parts = [res[1] for res in done]
        weights = [res[2] for res in done]
        for p in parts:
            if not np.isfinite(p["total"]):
                raise NumericError(f"training loss diverged (NaN/Inf) in round {r}")
        model = fedavg(models, weights)
        _check_finite_params(model, f"round {r}")

        record = RoundRecord(
            round=r,
            losses=_mean_parts(parts),
            metrics=_round_metrics(model, test, forget),
            client_sample_counts=[len(ds) if ds is not None else 0 for ds in client_datasets],
            duration_ms=(time.perf_counter() - t0) * 1e3,
            comm_per_client_bytes=model_bytes,
            comm_total_bytes=model_bytes * len(done),
        )
        records.append(record)
        if on_round is not None:
            on_round(record, model)
    return model, records


def pretrain(
    config: ExperimentConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    partition: Partition,
    on_round=None,
) -> RunResult:
    """Standard FedAvg pretraining with pure cross-entropy local epochs."""
    model = init_params(config.model_dims(), derive_seed(config.seed, "init"))
    client_datasets = [train.subset(ix) for ix in partition.client_indices]
    forget = set(config.resolved_forget_classes())
    model, records = _fedavg_ce_rounds(
        model,
        client_datasets,
        config.pretrain_rounds,
        config,
        test,
        forget,
        stream_tag="pretrain",
        on_round=on_round,
    )
    return RunResult(model=model, records=records)


def _tcs_assignments(
    model: ModelParams,
    dataset: LabeledDataset,
    forget_mask: np.ndarray,
    global_ts: GlobalTS,
) -> dict[int, int]:
    originals = dataset.original_labels if dataset.original_labels is not None else dataset.labels
    rows = np.flatnonzero(forget_mask)
    probs = forward(model, dataset.features[rows]).probabilities
    out = {}
    for j, i in enumerate(rows):
        u = int(originals[i])
        out[int(i)] = assign_transformation_class(probs[j], u, global_ts.candidates_for(u))
    return out


def _random_assignments(
    dataset: LabeledDataset, forget_mask: np.ndarray, random_map: dict[int, int]
) -> dict[int, int]:
    originals = dataset.original_labels if dataset.original_labels is not None else dataset.labels
    return {int(i): random_map[int(originals[i])] for i in np.flatnonzero(forget_mask)}


def build_transformation_sets(
    origin: ModelParams,
    config: ExperimentConfig,
    client_datasets: list[LabeledDataset],
    forget: set[int],
) -> GlobalTS:
    """TCS phase against the original model: local sets, then server merge."""
    thresholds = config.ts_thresholds()
    reports: dict[int, list] = {}
    for ds in client_datasets:
        for u in sorted(forget):
            feats = ds.features[ds.labels == u]
            if len(feats) == 0:
                continue
            ts = local_ts(origin, feats, u, forget, thresholds)
            if ts is not None:
                reports.setdefault(u, []).append(ts)
    return aggregate_global_ts(reports, forget)


def run_fucrt(
    origin: ModelParams,
    config: ExperimentConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    partition: Partition,
    on_round=None,
) -> RunResult:
    """The full unlearning loop: TCS, relabel, bootstrap prototypes, then
    rounds of dual-contrastive local training with FedAvg + prototype
    aggregation."""
    forget = set(config.resolved_forget_classes())
    if not forget:
        raise ConfigurationError("forget_classes: the unlearning run needs a non-empty target")
    loss_cfg = config.loss_config()
    client_datasets = [train.subset(ix) for ix in partition.client_indices]

    if config.disable_tcs:
        strategy = "random"
        remaining = [c for c in range(config.classes) if c not in forget]
        random_map = {
            u: int(stream(config.seed, "random-label", u).choice(remaining))
            for u in sorted(forget)
        }
        global_ts = GlobalTS(per_class={u: [t] for u, t in random_map.items()})
    else:
        strategy = "tcs"
        random_map = {}
        global_ts = build_transformation_sets(origin, config, client_datasets, forget)

    states: list[ClientState] = []
    for k, ds in enumerate(client_datasets):
        mask = np.isin(ds.labels, sorted(forget))
        if np.any(mask):
            if strategy == "random":
                assignments = _random_assignments(ds, mask, random_map)
            else:
                assignments = _tcs_assignments(origin, ds, mask, global_ts)
            ds = relabel_for_unlearning(ds, assignments, forget)
        states.append(
            ClientState(client_id=k, dataset=ds, forget_mask=mask, has_unlearning=bool(mask.any()))
        )

    model_bytes = len(serialize_params(origin))
    proto_bytes = config.classes * config.rep_dim * 8
    comm_per_client = model_bytes + proto_bytes
    n_clients = len(states)

    # Bootstrap: prototypes of the original model on the relabeled data.
    t0 = time.perf_counter()
    banks = [local_prototypes(origin, st.dataset) for st in states]
    bank = aggregate_prototypes(banks, empty_bank(config.classes, config.rep_dim), round_tag=0)
    model = origin.copy()
    bootstrap_parts = [_loss_parts_eval(origin, st.dataset, loss_cfg, bank) for st in states]
    records = [
        RoundRecord(
            round=0,
            losses=_mean_parts(bootstrap_parts),
            metrics=_round_metrics(model, test, forget),
            client_sample_counts=[len(st.dataset) for st in states],
            duration_ms=(time.perf_counter() - t0) * 1e3,
            comm_per_client_bytes=comm_per_client,
            comm_total_bytes=comm_per_client * n_clients,
        )
    ]
    if on_round is not None:
        on_round(records[0], model)

    for r in range(1, config.unlearn_rounds):
        t0 = time.perf_counter()

        def task(k: int):
            st = states[k]
            rng = stream(config.seed, "unlearn", k, r)
            local = model.copy()
            if st.has_unlearning and strategy == "tcs" and not config.reassign_per_batch:
                assignments = _tcs_assignments(local, st.dataset, st.forget_mask, global_ts)
                st.dataset = relabel_for_unlearning(st.dataset, assignments, forget)

            refresh = None
            if st.has_unlearning and strategy == "tcs" and config.reassign_per_batch:
                def refresh(params, st=st):
                    assignments = _tcs_assignments(params, st.dataset, st.forget_mask, global_ts)
                    labels = (
                        st.dataset.original_labels.copy()
                        if st.dataset.original_labels is not None
                        else st.dataset.labels.copy()
                    )
                    for i, target in assignments.items():
                        labels[i] = target
                    return labels

            trained, parts, labels = _epoch(
                local,
                st.dataset.features,
                st.dataset.labels,
                loss_cfg,
                bank,
                rng,
                config.learning_rate,
                config.batch_size,
                refresh=refresh,
            )
            if refresh is not None:
                assignments = _tcs_assignments(trained, st.dataset, st.forget_mask, global_ts)
                st.dataset = relabel_for_unlearning(st.dataset, assignments, forget)
            protos = local_prototypes(trained, st.dataset)
            return trained, protos, parts, len(st.dataset)

        results = _map_clients(task, n_clients, config.threads)
        models = [res[0] for res in results]
        proto_banks = [res[1] for res in results]
        parts = [res[2] for res in results]
        weights = [res[3] for res in results]
        for p in parts:
            if not np.isfinite(p["total"]):
                raise NumericError(f"unlearning loss diverged (NaN/Inf) in round {r}")
        model = fedavg(models, weights)
        _check_finite_params(model, f"round {r}")
        bank = aggregate_prototypes(proto_banks, bank, round_tag=r)

        record = RoundRecord(
            round=r,
            losses=_mean_parts(parts),
            metrics=_round_metrics(model, test, forget),
            client_sample_counts=list(weights),
            duration_ms=(time.perf_counter() - t0) * 1e3,
            comm_per_client_bytes=comm_per_client,
            comm_total_bytes=comm_per_client * n_clients,
        )
        records.append(record)
        if on_round is not None:
            on_round(record, model)

    return RunResult(model=model, records=records, global_ts=global_ts, ts_strategy=strategy)


BASELINES = ("from_scratch", "fine_tune", "gradient_ascent")


def run_baseline(
    kind: str,
    origin: ModelParams,
    config: ExperimentConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    partition: Partition,
    on_round=None,
) -> RunResult:
    """Retrain-from-scratch, fine-tune, or reverse-gradient baselines."""
    if kind not in BASELINES:
        raise ConfigurationError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    forget = set(config.resolved_forget_classes())
    client_datasets = [train.subset(ix) for ix in partition.client_indices]
    rounds = config.unlearn_rounds - 1

    if kind == "gradient_ascent":
        if not forget:
            raise ConfigurationError("gradient_ascent needs a non-empty forget set")
        ascent_data = []
        for ds in client_datasets:
            mask = np.isin(ds.labels, sorted(forget))
            ascent_data.append(ds.subset(np.flatnonzero(mask)) if np.any(mask) else None)
        model, records = _fedavg_ce_rounds(
            origin.copy(),
            ascent_data,
            rounds,
            config,
            test,
            forget,
            stream_tag="ascent",
            ascend=True,
            on_round=on_round,
            clip_norm=config.ascent_clip_norm,
        )
        return RunResult(model=model, records=records)

    remaining_data = []
    for ds in client_datasets:
        keep = np.flatnonzero(~np.isin(ds.labels, sorted(forget)))
        remaining_data.append(ds.subset(keep) if len(keep) else None)

    if kind == "from_scratch":
        start = init_params(config.model_dims(), derive_seed(config.seed, "init"))
    else:
        start = origin.copy()
    model, records = _fedavg_ce_rounds(
        start,
        remaining_data,
        rounds,
        config,
        test,
        forget,
        stream_tag="pretrain",
        on_round=on_round,
    )
    return RunResult(model=model, records=records)


def rounds_to_target(records: list[RoundRecord], target_remaining_acc: float) -> int | None:
    """First training round whose remaining-group accuracy meets the target."""
    for rec in records:
        if rec.round < 1:
            continue
        acc = rec.metrics.get("remaining_acc")
        if acc is not None and acc >= target_remaining_acc:
            return rec.round
    return None
