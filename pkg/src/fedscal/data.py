"""Synthetic source/target domains, client sharding and feature-space augmentations."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import RngStream


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    class_means: np.ndarray  # (J, d)
    within_class_std: float
    shift_matrix: np.ndarray  # A, (d, d)
    shift_bias: np.ndarray  # b, (d,)
    samples_per_class: int
    name: str = ""

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        J, d = means.shape
        if J < 2 or d < 2:
            raise ConfigurationError(f"domain {self.domain_id}: need J >= 2 and d >= 2, got J={J}, d={d}")
        if self.within_class_std < 0:
            raise ConfigurationError(f"domain {self.domain_id}: within_class_std must be >= 0")
        if self.samples_per_class < 1:
            raise ConfigurationError(f"domain {self.domain_id}: samples_per_class must be positive")
        A = np.asarray(self.shift_matrix, dtype=np.float64)
        if A.shape != (d, d):
            raise ConfigurationError(f"domain {self.domain_id}: shift matrix must be {d}x{d}")
        if np.linalg.cond(A) > 100.0 + 1e-9:
            raise ConfigurationError(f"domain {self.domain_id}: shift matrix condition number exceeds 100")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "shift_matrix", A)
        object.__setattr__(self, "shift_bias", np.asarray(self.shift_bias, dtype=np.float64).reshape(d))

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


@dataclass(frozen=True)
class LabeledDataset:
    """Features with ground-truth labels. Labels are for training the source model and for metrics."""

    domain_id: int
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class UnlabeledView:
    """What a client's adaptation code is allowed to see: no label accessor."""

    client_id: int
    domain_id: int
    features: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    domain_id: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.shape[0] == 0:
            raise ConfigurationError(f"client {self.client_id} has no samples")
        for arr in (self.features, self.labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    def unlabeled(self) -> UnlabeledView:
        return UnlabeledView(self.client_id, self.domain_id, self.features)


@dataclass(frozen=True)
class AugmentationConfig:
    weak_std: float = 0.1
    strong_std: float = 0.2
    mask_prob: float = 0.1

    def __post_init__(self):
        if self.weak_std < 0:
            raise ConfigurationError("weak_std must be >= 0")
        if self.strong_std < self.weak_std:
            raise ConfigurationError("strong_std must be >= weak_std")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigurationError("mask_prob must lie in [0, 1)")


def generate_domain(spec: DomainSpec, rng: RngStream) -> LabeledDataset:
    J, d = spec.class_means.shape
    n = spec.samples_per_class
    xs, ys = [], []
    for j in range(J):
        z = rng.normal((n, d))
        raw = spec.class_means[j] + spec.within_class_std * z
        xs.append(raw @ spec.shift_matrix.T + spec.shift_bias)
        ys.append(np.full(n, j, dtype=np.int64))
    return LabeledDataset(spec.domain_id, np.vstack(xs), np.concatenate(ys))


def build_federation(
    source: DomainSpec,
    targets: Sequence[DomainSpec],
    clients_per_domain: int,
    rng: RngStream,
    batch_size: int = 1,
) -> tuple[LabeledDataset, list[ClientDataset]]:
    """Generate the source set and split each target domain into iid client shards."""
    if not targets:
        raise ConfigurationError("at least one target domain is required")
    if clients_per_domain < 1:
        raise ConfigurationError("clients_per_domain must be positive")
    source_data = generate_domain(source, rng)
    clients: list[ClientDataset] = []
    for spec in targets:
        pool = generate_domain(spec, rng)
        order = rng.permutation(len(pool))
        for shard in np.array_split(order, clients_per_domain):
            if shard.size < batch_size:
                raise ConfigurationError(
                    f"domain {spec.domain_id}: shard of {shard.size} samples is smaller than batch size {batch_size}"
                )
            shard = np.sort(shard)
            clients.append(
                ClientDataset(
                    client_id=len(clients),
                    domain_id=spec.domain_id,
                    features=pool.features[shard].copy(),
                    labels=pool.labels[shard].copy(),
                )
            )
    return source_data, clients


def random_shift(d: int, rng: RngStream, max_log_scale: float, rotation: float, translation: float):
    """Random well-conditioned affine map: rotation by up to ``rotation`` radians per plane, log-uniform axis scaling."""
    q, _ = np.linalg.qr(rng.normal((d, d)))
    angles = rotation * (2.0 * rng.uniform(d // 2) - 1.0)
    rot = np.eye(d)
    for k, theta in enumerate(angles):
        i, j = 2 * k, 2 * k + 1
        c, s = np.cos(theta), np.sin(theta)
        rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, -s, s, c
    rot = q @ rot @ q.T
    scales = np.exp(max_log_scale * (2.0 * rng.uniform(d) - 1.0))
    A = rot @ np.diag(scales)
    b = translation * rng.normal(d)
    return A, b


@dataclass
class GeometryConfig:
    dim: int = 16
    num_classes: int = 8
    samples_per_class: int = 60
    num_targets: int = 3
    clients_per_domain: int = 5
    class_separation: float = 0.5
    within_class_std: float = 0.5
    max_log_scale: float = 1.5
    rotation: float = 1.5
    translation: float = 0.5
    source_samples_per_class: int | None = None
    geometry_seed: int = 0


def make_domain_specs(geo: GeometryConfig) -> tuple[DomainSpec, list[DomainSpec]]:
    """Shared class-mean geometry; the source is untransformed, each target gets its own affine shift."""
    rng = RngStream(geo.geometry_seed, (7, 0))
    means = geo.class_separation * rng.normal((geo.num_classes, geo.dim))
    source = DomainSpec(
        domain_id=0,
        class_means=means,
        within_class_std=geo.within_class_std,
        shift_matrix=np.eye(geo.dim),
        shift_bias=np.zeros(geo.dim),
        samples_per_class=geo.source_samples_per_class or geo.samples_per_class,
        name="source",
    )
    targets = []
    for t in range(geo.num_targets):
        A, b = random_shift(geo.dim, rng, geo.max_log_scale, geo.rotation, geo.translation)
        targets.append(
            DomainSpec(
                domain_id=t + 1,
                class_means=means,
                within_class_std=geo.within_class_std,
                shift_matrix=A,
                shift_bias=b,
                samples_per_class=geo.samples_per_class,
                name=f"target{t + 1}",
            )
        )
    return source, targets


def weak_augment(x: np.ndarray, cfg: AugmentationConfig, rng: RngStream) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x + cfg.weak_std * rng.normal(x.shape)


def strong_augment(x: np.ndarray, cfg: AugmentationConfig, rng: RngStream) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    keep = rng.uniform(x.shape) >= cfg.mask_prob
    return np.where(keep, x, 0.0) + cfg.strong_std * rng.normal(x.shape)


def augment_pair(x: np.ndarray, cfg: AugmentationConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """One weak and one strong view per row; draw order is fixed (weak noise, mask, strong noise)."""
    return weak_augment(x, cfg, rng), strong_augment(x, cfg, rng)


def dump_jsonl(path: str | Path, datasets: Sequence[LabeledDataset | ClientDataset]) -> None:
    with open(path, "w") as fh:
        for ds in datasets:
            for x, y in zip(ds.features, ds.labels):
                row = {"domain_id": int(ds.domain_id), "label": int(y), "features": [float(v) for v in x]}
                fh.write(json.dumps(row) + "\n")


def load_jsonl(path: str | Path) -> dict[int, LabeledDataset]:
    feats: dict[int, list] = {}
    labels: dict[int, list] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            dom = int(row["domain_id"])
            feats.setdefault(dom, []).append(row["features"])
            labels.setdefault(dom, []).append(row["label"])
    return {
        dom: LabeledDataset(dom, np.asarray(feats[dom], dtype=np.float64), np.asarray(labels[dom], dtype=np.int64))
        for dom in feats
    }
