"""Transformation class selection.

Clients build local candidate sets from the second-highest-probability
mass of correctly classified unlearning samples; the server aggregates
them into one global set per unlearned class; individual samples are then
assigned the set member the model currently rates most probable.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ProtocolError
from .nn import ModelParams, forward


@dataclass(frozen=True)
class TSThresholds:
    """tau_p: relative probability-mass cut in (0, 1]; tau_s: support gate."""

    tau_p: float = 0.7
    tau_s: int = 5

    def __post_init__(self):
        if not 0.0 < self.tau_p <= 1.0:
            raise ConfigurationError(f"tau_p must be in (0, 1], got {self.tau_p}")
        if self.tau_s < 1:
            raise ConfigurationError(f"tau_s must be a positive integer, got {self.tau_s}")


@dataclass
class LocalTS:
    """One client's candidate transformation classes for one unlearned class."""

    unlearned_class: int
    candidates: list[int]  # descending accumulated probability
    support: int  # correctly classified samples used
    psum: dict[int, float] = field(default_factory=dict)


@dataclass
class GlobalTS:
    """Server-aggregated transformation class set per unlearned class."""

    per_class: dict[int, list[int]]

    def candidates_for(self, unlearned_class: int) -> list[int]:
        return self.per_class[unlearned_class]

    def as_json(self) -> dict[str, list[int]]:
        return {str(u): list(cands) for u, cands in sorted(self.per_class.items())}


def local_ts_from_probabilities(
    probabilities: np.ndarray,
    unlearned_class: int,
    forget_classes: set[int],
    thresholds: TSThresholds,
) -> LocalTS | None:
    """Candidate set from a table of probability rows for class-u samples.

    Keeps rows the model classifies as u (argmax over all classes), gates on
    the support count, accumulates each kept row's top eligible-class
    probability, and keeps classes within tau_p of the accumulated maximum.
    Eligible classes exclude every class being unlearned.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    n_classes = probabilities.shape[1]
    eligible = [c for c in range(n_classes) if c != unlearned_class and c not in forget_classes]
    if not eligible:
        raise ProtocolError("no eligible transformation classes outside the unlearning set")

    correct = probabilities[probabilities.argmax(axis=1) == unlearned_class]
    if len(correct) < thresholds.tau_s:
        return None

    eligible_arr = np.array(eligible)
    top_eligible = eligible_arr[np.argmax(correct[:, eligible_arr], axis=1)]
    psum = np.zeros(n_classes)
    np.add.at(psum, top_eligible, correct[np.arange(len(correct)), top_eligible])

    max_mass = psum[eligible_arr].max()
    cut = thresholds.tau_p * max_mass
    chosen = [c for c in eligible if psum[c] >= cut]
    chosen.sort(key=lambda c: (-psum[c], c))
    return LocalTS(
        unlearned_class=unlearned_class,
        candidates=chosen,
        support=len(correct),
        psum={c: float(psum[c]) for c in chosen},
    )


def local_ts(
    model: ModelParams,
    features: np.ndarray,
    unlearned_class: int,
    forget_classes: set[int],
    thresholds: TSThresholds,
) -> LocalTS | None:
    """Candidate set for one client's samples of one unlearned class."""
    probs = forward(model, features).probabilities
    return local_ts_from_probabilities(probs, unlearned_class, forget_classes, thresholds)


def aggregate_global_ts(
    reports: dict[int, list[LocalTS]], forget_classes: set[int]
) -> GlobalTS:
    """Merge client candidate sets into one global set per unlearned class.

    Set size is the mode of reported sizes (ties toward the smaller size);
    membership is by occurrence frequency, ties broken by higher accumulated
    probability mass across clients, then by lower class id.
    """
    per_class: dict[int, list[int]] = {}
    for u in sorted(forget_classes):
        client_sets = reports.get(u, [])
        if not client_sets:
            raise ProtocolError(
                f"no client reported a transformation set for class {u}; lower tau_s"
            )
        size_counts = Counter(len(ts.candidates) for ts in client_sets)
        best = max(size_counts.values())
        size = min(s for s, n in size_counts.items() if n == best)

        freq: Counter = Counter()
        mass: dict[int, float] = {}
        for ts in client_sets:
            for c in ts.candidates:
                freq[c] += 1
                mass[c] = mass.get(c, 0.0) + ts.psum.get(c, 0.0)
        ranked = sorted(freq, key=lambda c: (-freq[c], -mass[c], c))
        per_class[u] = ranked[:size]
    return GlobalTS(per_class=per_class)


def assign_transformation_class(
    probabilities: np.ndarray, original_label: int, candidates: list[int]
) -> int:
    """Set member with the highest current probability; ties to lower id."""
    if not candidates:
        raise ProtocolError(f"empty transformation set for class {original_label}")
    probabilities = np.asarray(probabilities, dtype=np.float64)
    best = min(candidates, key=lambda c: (-probabilities[c], c))
    return int(best)
