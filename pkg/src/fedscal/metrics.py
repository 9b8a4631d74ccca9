"""Label-dependent evaluation: pseudo-label accuracy, per-domain accuracy, supervision correctness."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .adaptation import PseudoLabelTable, gated_targets
from .data import ClientDataset
from .model import ModelParams, accuracy, forward


def pseudo_label_accuracy(table: PseudoLabelTable | np.ndarray, labels: np.ndarray) -> float:
    pseudo = table.labels if isinstance(table, PseudoLabelTable) else np.asarray(table)
    labels = np.asarray(labels)
    if pseudo.shape != labels.shape:
        raise ValueError(f"pseudo-label table covers {pseudo.shape[0]} samples, dataset has {labels.shape[0]}")
    if labels.size == 0:
        raise ValueError("empty dataset")
    return float(np.mean(pseudo == labels))


def delta_pacc(series_a: Sequence[float], series_b: Sequence[float], round_index: int) -> float:
    """pAcc(A) - pAcc(B) at a 1-based round index."""
    if not 1 <= round_index <= min(len(series_a), len(series_b)):
        raise IndexError(f"round {round_index} outside 1..{min(len(series_a), len(series_b))}")
    return float(series_a[round_index - 1] - series_b[round_index - 1])


def delta_pacc_series(series_a: Sequence[float], series_b: Sequence[float]) -> list[float]:
    if len(series_a) != len(series_b):
        raise ValueError("runs have different numbers of rounds")
    return [delta_pacc(series_a, series_b, r) for r in range(1, len(series_a) + 1)]


@dataclass(frozen=True)
class DomainAccuracy:
    per_client: dict
    per_domain: dict
    average: float


def evaluate_accuracy(
    params: ModelParams | Mapping[int, ModelParams], clients: Sequence[ClientDataset]
) -> DomainAccuracy:
    """Argmax accuracy per client, averaged within each domain and then across domains.

    ``params`` is either one model for every client or a mapping client-id -> model.
    """
    per_client = {}
    by_domain: dict[int, list[float]] = {}
    for c in clients:
        p = params[c.client_id] if isinstance(params, Mapping) else params
        acc = accuracy(p, c.features, c.labels)
        per_client[c.client_id] = acc
        by_domain.setdefault(c.domain_id, []).append(acc)
    per_domain = {dom: float(np.mean(v)) for dom, v in sorted(by_domain.items())}
    return DomainAccuracy(per_client, per_domain, float(np.mean(list(per_domain.values()))))


@dataclass(frozen=True)
class SupervisionCounts:
    """Wrong gated targets from the client path, the server path, and both at once.

    ``both_wrong`` counts samples gated by both models whose targets are both wrong.
    """

    local_wrong: int
    global_wrong: int
    both_wrong: int
    local_gated: int
    global_gated: int

    def __add__(self, other: SupervisionCounts) -> SupervisionCounts:
        return SupervisionCounts(*(a + b for a, b in zip(self.astuple(), other.astuple())))

    def astuple(self) -> tuple[int, int, int, int, int]:
        return self.local_wrong, self.global_wrong, self.both_wrong, self.local_gated, self.global_gated

    @property
    def consistent(self) -> bool:
        return self.both_wrong <= min(self.local_wrong, self.global_wrong)


def supervision_counts(local_targets: np.ndarray, global_targets: np.ndarray, labels: np.ndarray) -> SupervisionCounts:
    """Targets use -1 for ungated samples; those are excluded from the respective count."""
    lt = np.asarray(local_targets)
    gt = np.asarray(global_targets)
    y = np.asarray(labels)
    lw = (lt >= 0) & (lt != y)
    gw = (gt >= 0) & (gt != y)
    return SupervisionCounts(
        int(lw.sum()), int(gw.sum()), int((lw & gw).sum()), int((lt >= 0).sum()), int((gt >= 0).sum())
    )


def supervision_correctness(
    client: ModelParams, server: ModelParams, weak: np.ndarray, labels: np.ndarray, tau: float
) -> SupervisionCounts:
    """Gate both models on the same weakly augmented batch and count wrong targets."""
    lt = gated_targets(forward(client, weak).probs, tau)
    gt = gated_targets(forward(server, weak).probs, tau)
    return supervision_counts(lt, gt, labels)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
