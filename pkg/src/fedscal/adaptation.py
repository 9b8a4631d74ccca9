"""Pseudo-labeling, local-adaptation objectives, server/client alignment and adaptive thresholding."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from decimal import Decimal

import numpy as np

from .data import AugmentationConfig, augment_pair
from .model import LossSpec, ModelParams, forward
from .numerics import RngStream, cosine_distance_matrix, safe_log, softmax, stats_mean_median_std


class DegenerateModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class PrototypeSet:
    centroids: np.ndarray  # (J, h)
    valid: np.ndarray  # (J,) bool

    def __post_init__(self):
        if not self.valid.any():
            raise DegenerateModelError("no class has any prototype mass")


@dataclass(frozen=True)
class PseudoLabelTable:
    labels: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class ThresholdState:
    tau_init: float = 0.8
    gamma_low: float = -0.1
    gamma_high: float = 0.15
    tau: float | None = None
    gamma: float = 0.0

    def __post_init__(self):
        if not self.gamma_low <= 0.0 <= self.gamma_high:
            raise ValueError("clip bounds must satisfy gamma_low <= 0 <= gamma_high")
        if self.tau is None:
            self.tau = self.tau_init

    @property
    def bounds(self) -> tuple[float, float]:
        # decimal sums, so 0.8 + 0.15 gives the double nearest 0.95 rather than one ulp above it
        lo = float(Decimal(repr(self.tau_init)) + Decimal(repr(self.gamma_low)))
        hi = float(Decimal(repr(self.tau_init)) + Decimal(repr(self.gamma_high)))
        return lo, hi


@dataclass(frozen=True)
class SCAlConfig:
    lambda_local: float = 1.0
    lambda_global: float = 1.0
    beta: float = 0.3
    adaptive_threshold: bool = True

    def __post_init__(self):
        if self.lambda_local < 0 or self.lambda_global < 0:
            raise ValueError("alignment weights must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class BMDState:
    ratio: float = 3.0
    momentum: float = 0.7
    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 1.0
    centroids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.ratio <= 0:
            raise ValueError("selection ratio must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("EMA momentum must lie in [0, 1]")


# ---------------------------------------------------------------- prototypes


def soft_prototypes(probs: np.ndarray, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-mass weighted class centroids and their denominators."""
    mass = probs.sum(axis=0)
    safe = np.where(mass < 1e-8, 1.0, mass)
    return (probs.T @ feats) / safe[:, None], mass


def nearest_prototype(feats: np.ndarray, centroids: np.ndarray, valid: np.ndarray) -> PseudoLabelTable:
    """Nearest valid centroid under cosine distance; ties go to the lowest class index."""
    cls = np.flatnonzero(valid)
    dist = cosine_distance_matrix(feats, centroids[cls])
    pick = np.argmin(dist, axis=1)  # first minimum wins
    return PseudoLabelTable(cls[pick], dist[np.arange(len(pick)), pick])


def compute_prototypes(params: ModelParams, X: np.ndarray, refine: bool = True) -> PrototypeSet:
    """Soft-weighted centroids, optionally followed by one hard-assignment refinement pass.

    A class is valid only if it has softmax mass and is the argmax prediction of at
    least one sample; the refinement pass drops classes that receive no assignments.
    """
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    cache = forward(params, X)
    centroids, mass = soft_prototypes(cache.probs, cache.hidden)
    counts = np.bincount(np.argmax(cache.probs, axis=1), minlength=mass.size)
    valid = (mass >= 1e-8) & (counts > 0)
    protos = PrototypeSet(centroids, valid)
    if not refine:
        return protos
    table = nearest_prototype(cache.hidden, protos.centroids, protos.valid)
    onehot = np.eye(mass.size)[table.labels]
    hard, hard_mass = soft_prototypes(onehot, cache.hidden)
    return PrototypeSet(hard, hard_mass >= 1e-8)


def assign_pseudo_labels(protos: PrototypeSet, params: ModelParams, X: np.ndarray) -> PseudoLabelTable:
    feats = forward(params, np.atleast_2d(X)).hidden
    return nearest_prototype(feats, protos.centroids, protos.valid)


# ---------------------------------------------------------------- local adaptation objective


def loa_loss_targets(pseudo_labels: np.ndarray, beta: float) -> LossSpec:
    """Entropy + diversity + beta-weighted pseudo-label cross-entropy."""
    return LossSpec(ent=1.0, div=1.0, pce=beta, pseudo_labels=np.asarray(pseudo_labels))


def loa_terms(probs: np.ndarray, pseudo_labels: np.ndarray, beta: float) -> dict:
    """Values of the three LoA terms for a batch of predictions (pce includes beta)."""
    B = probs.shape[0]
    logp = safe_log(probs)
    pbar = probs.mean(axis=0)
    ent = float(np.mean(-np.sum(probs * logp, axis=1)))
    div = float(np.sum(pbar * safe_log(pbar)))
    pce = float(beta * np.mean(-logp[np.arange(B), pseudo_labels]))
    return {"ent": ent, "div": div, "pce": pce, "total": ent + div + pce}


# ---------------------------------------------------------------- server / client alignment


def gated_targets(probs: np.ndarray, tau: float) -> np.ndarray:
    """Argmax class where max confidence is strictly above ``tau``, else -1."""
    conf = probs.max(axis=1)
    return np.where(conf > tau, np.argmax(probs, axis=1), -1)


def alignment_value(strong_probs: np.ndarray, targets: np.ndarray) -> tuple[float, int]:
    gated = np.flatnonzero(targets >= 0)
    if gated.size == 0:
        return 0.0, 0
    return float(np.mean(-safe_log(strong_probs[gated, targets[gated]]))), int(gated.size)


@dataclass(frozen=True)
class AlignmentBatch:
    """Shared augmentations and gated one-hot targets for one mini-batch."""

    weak: np.ndarray
    strong: np.ndarray
    local_targets: np.ndarray
    global_targets: np.ndarray


def alignment_batch(
    client: ModelParams,
    server: ModelParams | None,
    X: np.ndarray,
    tau: float,
    aug: AugmentationConfig,
    rng: RngStream,
) -> AlignmentBatch:
    weak, strong = augment_pair(X, aug, rng)
    local = gated_targets(forward(client, weak).probs, tau)
    if server is None:
        glob = np.full(X.shape[0], -1)
    else:
        glob = gated_targets(forward(server, weak).probs, tau)
    return AlignmentBatch(weak, strong, local, glob)


def client_align_loss(
    client: ModelParams, X: np.ndarray, tau: float, rng: RngStream, aug: AugmentationConfig
) -> tuple[float, int]:
    weak, strong = augment_pair(np.atleast_2d(X), aug, rng)
    targets = gated_targets(forward(client, weak).probs, tau)
    return alignment_value(forward(client, strong).probs, targets)


def server_align_loss(
    server: ModelParams, client: ModelParams, weak: np.ndarray, strong: np.ndarray, tau: float
) -> tuple[float, int]:
    """Gate and target from the frozen server model on the weak view; KL target is the client on the strong view."""
    targets = gated_targets(forward(server, weak).probs, tau)
    return alignment_value(forward(client, strong).probs, targets)


def scal_loss(local: float, glob: float, cfg: SCAlConfig) -> float:
    return cfg.lambda_local * local + cfg.lambda_global * glob


def scal_loss_spec(base: LossSpec, batch: AlignmentBatch, cfg: SCAlConfig) -> LossSpec:
    return replace(
        base,
        local=cfg.lambda_local,
        glob=cfg.lambda_global,
        strong=batch.strong,
        local_targets=batch.local_targets,
        global_targets=batch.global_targets,
    )


# ---------------------------------------------------------------- adaptive threshold


def skewness(values: np.ndarray) -> float:
    mean, median, std = stats_mean_median_std(values)
    if std < 1e-9:
        return 0.0
    return 3.0 * (mean - median) / std


def threshold_from_gamma(state: ThresholdState, gamma: float) -> float:
    lo, hi = state.bounds
    return min(max(state.tau_init + gamma, lo), hi)


def update_threshold(state: ThresholdState, params: ModelParams, X: np.ndarray) -> ThresholdState:
    """Recompute tau from the Pearson skewness of per-sample prediction entropies on clean inputs."""
    probs = forward(params, np.atleast_2d(X)).probs
    ent = -np.sum(probs * safe_log(probs), axis=1)
    gamma = skewness(ent)
    return replace(state, tau=threshold_from_gamma(state, gamma), gamma=gamma)


# ---------------------------------------------------------------- BMD pseudo-labeler


def bmd_top_m(n: int, num_classes: int, ratio: float) -> int:
    return min(n, max(1, int(np.floor(n / (ratio * num_classes)))))


def bmd_prototypes(params: ModelParams, X: np.ndarray, state: BMDState) -> PrototypeSet:
    """Class-balanced prototypes: mean feature of the top-M most confident samples per class.

    Also (re)initialises the EMA centroids held in ``state``.
    """
    cache = forward(params, np.atleast_2d(X))
    n, J = cache.probs.shape
    M = bmd_top_m(n, J, state.ratio)
    centroids = np.empty((J, cache.hidden.shape[1]))
    for j in range(J):
        top = np.argsort(-cache.probs[:, j], kind="stable")[:M]
        centroids[j] = cache.hidden[top].mean(axis=0)
    state.centroids = centroids.copy()
    return PrototypeSet(centroids, np.ones(J, dtype=bool))


def prototype_affinity(feats: np.ndarray, centroids: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax over classes of cosine similarity between features and centroids."""
    sim = 1.0 - cosine_distance_matrix(feats, centroids)
    return softmax(sim / temperature)


def bmd_ema_update(state: BMDState, feats: np.ndarray) -> np.ndarray:
    """Blend the mini-batch affinity-weighted centroids into the EMA centroids."""
    aff = prototype_affinity(feats, state.centroids, state.temperature)
    batch_c, mass = soft_prototypes(aff, feats)
    blended = state.momentum * state.centroids + (1.0 - state.momentum) * batch_c
    state.centroids = np.where((mass >= 1e-8)[:, None], blended, state.centroids)
    return state.centroids


def bmd_loss(
    params: ModelParams, X: np.ndarray, static_labels: np.ndarray, state: BMDState, update: bool = True
) -> LossSpec:
    """Static pseudo-label CE (weight alpha) plus symmetric CE against dynamic soft labels (weight beta)."""
    if state.centroids is None:
        raise ValueError("BMD centroids are not initialised")
    feats = forward(params, np.atleast_2d(X)).hidden
    if update:
        bmd_ema_update(state, feats)
    dyn = prototype_affinity(feats, state.centroids, state.temperature)
    return LossSpec(
        pce=state.alpha, pseudo_labels=np.asarray(static_labels), dyn=state.beta, dyn_targets=dyn
    )


def bmd_terms(probs: np.ndarray, static_labels: np.ndarray, dyn: np.ndarray, state: BMDState) -> dict:
    B = probs.shape[0]
    st = float(np.mean(-safe_log(probs[np.arange(B), static_labels])))
    sym = float(np.mean(-np.sum(dyn * safe_log(probs), axis=1) - np.sum(probs * safe_log(dyn), axis=1)))
    return {"st": st, "dyn": sym, "total": state.alpha * st + state.beta * sym}

