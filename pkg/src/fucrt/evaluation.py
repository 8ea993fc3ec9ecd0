"""Group metrics, membership inference, embedding export, merge diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import InsufficientDataError
from .losses import l2_normalize
from .nn import ModelParams, forward
from .tcs import GlobalTS


@dataclass
class GroupMetrics:
    """Accuracy/F1 (percent) of one class group, with per-class breakdown."""

    group: str  # "unlearning" | "remaining"
    accuracy: float
    f1: float
    per_class: dict[int, dict[str, float]]

    def as_json(self) -> dict:
        return {
            "group": self.group,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
        }


@dataclass
class MiaReport:
    """Confidence-threshold membership inference result."""

    asr: float  # balanced accuracy, percent
    threshold: float
    member_count: int
    nonmember_count: int

    def as_json(self) -> dict:
        return {
            "asr": self.asr,
            "threshold": self.threshold,
            "member_count": self.member_count,
            "nonmember_count": self.nonmember_count,
        }


def _predictions(model: ModelParams, dataset: LabeledDataset) -> np.ndarray:
    return forward(model, dataset.features).probabilities.argmax(axis=1)


def overall_accuracy(model: ModelParams, dataset: LabeledDataset) -> float:
    """Percent of samples whose argmax prediction matches the label."""
    labels = dataset.original_labels if dataset.original_labels is not None else dataset.labels
    return float(100.0 * np.mean(_predictions(model, dataset) == labels))


def _binary_f1(truth: np.ndarray, pred: np.ndarray, cls: int) -> float:
    tp = int(np.sum((truth == cls) & (pred == cls)))
    fp = int(np.sum((truth != cls) & (pred == cls)))
    fn = int(np.sum((truth == cls) & (pred != cls)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def group_metrics_from_predictions(
    truth: np.ndarray, pred: np.ndarray, class_count: int, forget_classes: set[int]
) -> tuple[GroupMetrics | None, GroupMetrics | None]:
    """Metrics from a (truth, prediction) table; see ``group_metrics``."""

    def metrics_for(classes: list[int], name: str) -> GroupMetrics | None:
        if not classes:
            return None
        mask = np.isin(truth, classes)
        if not np.any(mask):
            return None
        per_class = {}
        for c in classes:
            c_mask = truth == c
            acc = float(100.0 * np.mean(pred[c_mask] == c)) if np.any(c_mask) else 0.0
            per_class[c] = {"accuracy": acc, "f1": 100.0 * _binary_f1(truth, pred, c)}
        accuracy = float(100.0 * np.mean(pred[mask] == truth[mask]))
        f1 = float(np.mean([per_class[c]["f1"] for c in classes]))
        return GroupMetrics(group=name, accuracy=accuracy, f1=f1, per_class=per_class)

    unlearning = metrics_for(sorted(forget_classes), "unlearning")
    remaining = metrics_for(
        [c for c in range(class_count) if c not in forget_classes], "remaining"
    )
    return unlearning, remaining


def group_metrics(
    model: ModelParams, test: LabeledDataset, forget_classes: set[int]
) -> tuple[GroupMetrics | None, GroupMetrics | None]:
    """(unlearning, remaining) group metrics against original labels.

    Group accuracy is over the group's samples; per-class F1 is one-vs-rest
    over the whole test set, macro-averaged within the group. An empty group
    reports None.
    """
    truth = test.original_labels if test.original_labels is not None else test.labels
    pred = _predictions(model, test)
    return group_metrics_from_predictions(truth, pred, test.class_count, forget_classes)


def _confidences(model: ModelParams, features: np.ndarray) -> np.ndarray:
    return np.sort(forward(model, features).probabilities.max(axis=1))


def _balanced_accuracy(members: np.ndarray, nonmembers: np.ndarray, thr: float) -> float:
    tpr = float(np.mean(members > thr))
    tnr = float(np.mean(nonmembers <= thr))
    return 0.5 * (tpr + tnr)


def mia_asr(
    model: ModelParams,
    member_pool: np.ndarray,
    nonmember_pool: np.ndarray,
    calibration_members: np.ndarray,
    calibration_nonmembers: np.ndarray,
    seed: int = 0,
) -> MiaReport:
    """Confidence-threshold membership inference attack success rate.

    The attacker calls a sample a member when the model's max softmax
    probability exceeds a threshold fit to maximize balanced accuracy on the
    calibration pools (remaining-class train vs test data). ASR is the
    balanced accuracy, in percent, on the unlearning-class pools, both pools
    down-sampled to the same size.
    """
    for name, pool in (("member", member_pool), ("non-member", nonmember_pool)):
        if len(pool) < 10:
            raise InsufficientDataError(f"{name} pool has {len(pool)} samples; need >= 10")

    rng = np.random.default_rng(seed)
    m_conf = _confidences(model, member_pool)
    n_conf = _confidences(model, nonmember_pool)
    size = min(len(m_conf), len(n_conf))
    if len(m_conf) > size:
        m_conf = np.sort(rng.choice(m_conf, size=size, replace=False))
    if len(n_conf) > size:
        n_conf = np.sort(rng.choice(n_conf, size=size, replace=False))

    cal_m = _confidences(model, calibration_members)
    cal_n = _confidences(model, calibration_nonmembers)
    cal_size = min(len(cal_m), len(cal_n))
    if len(cal_m) > cal_size:
        cal_m = np.sort(rng.choice(cal_m, size=cal_size, replace=False))
    if len(cal_n) > cal_size:
        cal_n = np.sort(rng.choice(cal_n, size=cal_size, replace=False))

    candidates = np.unique(np.concatenate([cal_m, cal_n, [0.0, 1.0]]))
    best_thr, best_score = 0.5, -1.0
    for thr in candidates:
        score = _balanced_accuracy(cal_m, cal_n, thr)
        if score > best_score:
            best_thr, best_score = float(thr), score

    asr = 100.0 * _balanced_accuracy(m_conf, n_conf, best_thr)
    return MiaReport(
        asr=float(asr),
        threshold=best_thr,
        member_count=size,
        nonmember_count=size,
    )


def export_embeddings(model: ModelParams, dataset: LabeledDataset, path) -> None:
    """CSV of L2-normalized representations with original/current labels."""
    reps = forward(model, dataset.features).representations
    zhat, _ = l2_normalize(reps)
    originals = dataset.original_labels if dataset.original_labels is not None else dataset.labels
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["sample_id", "original_label", "current_label"]
                + [f"z{i}" for i in range(zhat.shape[1])]
            )
            for i in range(len(dataset)):
                writer.writerow(
                    [i, int(originals[i]), int(dataset.labels[i])]
                    + [f"{v:.17g}" for v in zhat[i]]
                )
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc


def class_centroids(model: ModelParams, dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean normalized representation per class; (centroids, presence)."""
    reps = forward(model, dataset.features).representations
    zhat, _ = l2_normalize(reps)
    labels = dataset.original_labels if dataset.original_labels is not None else dataset.labels
    centroids = np.zeros((dataset.class_count, zhat.shape[1]))
    present = np.zeros(dataset.class_count, dtype=bool)
    for c in range(dataset.class_count):
        mask = labels == c
        if np.any(mask):
            centroids[c] = zhat[mask].mean(axis=0)
            present[c] = True
    return centroids, present


def merge_diagnostic(
    model: ModelParams,
    test: LabeledDataset,
    forget_classes: set[int],
    global_ts: GlobalTS | None,
) -> dict[int, dict]:
    """Cosine-nearest remaining-class centroid for each unlearned class.

    Quantifies whether the unlearned class's representations have merged
    into its transformation class's cluster.
    """
    centroids, present = class_centroids(model, test)
    norms = np.maximum(np.linalg.norm(centroids, axis=1), 1e-12)
    unit = centroids / norms[:, None]
    remaining = [
        c for c in range(test.class_count) if c not in forget_classes and present[c]
    ]
    out = {}
    for u in sorted(forget_classes):
        if not present[u]:
            continue
        sims = {c: float(unit[u] @ unit[c]) for c in remaining}
        nearest = max(sims, key=lambda c: (sims[c], -c))
        candidates = global_ts.per_class.get(u, []) if global_ts is not None else []
        out[u] = {
            "nearest_remaining_class": int(nearest),
            "cosine": sims[nearest],
            "in_global_ts": bool(nearest in candidates),
            "similarities": {str(c): sims[c] for c in remaining},
        }
    return out
