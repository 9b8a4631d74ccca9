"""Federated orchestration: client sampling, local updates, averaging, checkpoints."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import adaptation as ad
from .data import AugmentationConfig, UnlabeledView
from .model import LossSpec, ModelParams, loss_and_encoder_grad, save_params, load_params
from .numerics import DimensionError, RngStream

METHODS = ("loa", "fedloa", "fedscal")
LABELERS = ("shot", "bmd")

# stream-id tags for RngStream
STREAM_SAMPLING = 1
STREAM_CLIENT = 2


class FederationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 30
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.03
    participation: float = 0.3
    seed: int = 0
    method: str = "fedscal"
    labeler: str = "shot"
    refine_prototypes: bool = True
    scal: ad.SCAlConfig = field(default_factory=ad.SCAlConfig)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    tau_init: float = 0.8
    gamma_low: float = -0.1
    gamma_high: float = 0.15
    bmd_ratio: float = 3.0
    bmd_momentum: float = 0.7
    bmd_alpha: float = 1.0
    bmd_beta: float = 1.0
    bmd_temperature: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.labeler not in LABELERS:
            raise ValueError(f"labeler must be one of {LABELERS}, got {self.labeler!r}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")

    def num_sampled(self, num_clients: int) -> int:
        # half-up rounding: 0.3 * 15 -> 5
        return min(num_clients, max(1, int(math.floor(self.participation * num_clients + 0.5))))

    def threshold_state(self) -> ad.ThresholdState:
        return ad.ThresholdState(self.tau_init, self.gamma_low, self.gamma_high)

    def bmd_state(self) -> ad.BMDState:
        return ad.BMDState(
            self.bmd_ratio, self.bmd_momentum, self.bmd_alpha, self.bmd_beta, self.bmd_temperature
        )


@dataclass
class BatchRecord:
    epoch: int
    indices: np.ndarray
    components: dict
    local_targets: np.ndarray | None = None
    global_targets: np.ndarray | None = None


@dataclass
class ClientResult:
    client_id: int
    params: ModelParams
    tau: float
    gamma: float
    pseudo_labels: list[np.ndarray] = field(default_factory=list)
    batches: list[BatchRecord] = field(default_factory=list)

    def mean_components(self) -> dict:
        keys = sorted({k for b in self.batches for k in b.components})
        return {k: float(np.mean([b.components.get(k, 0.0) for b in self.batches])) for k in keys}


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    tau: dict = field(default_factory=dict)
    gamma: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    drift: float = 0.0
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("tau", "gamma", "losses"):
            out[key] = {str(k): v for k, v in out[key].items()}
        return out

    @classmethod
    def from_json(cls, row: dict) -> RoundRecord:
        rec = cls(**row)
        for key in ("tau", "gamma", "losses"):
            setattr(rec, key, {int(k): v for k, v in getattr(rec, key).items()})
        return rec


@dataclass
class ServerState:
    round: int
    params: ModelParams
    history: list[RoundRecord] = field(default_factory=list)
    local_params: dict[int, ModelParams] = field(default_factory=dict)


def server_aggregate(params_list: Sequence[ModelParams]) -> ModelParams:
    """Element-wise mean, summed left to right. Entries equal across all inputs are kept bit-exact."""
    if not params_list:
        raise ValueError("nothing to aggregate")
    blocks = []
    for name in ("enc_w", "enc_b", "cls_w", "cls_b"):
        arrays = [getattr(p, name) for p in params_list]
        if any(a.shape != arrays[0].shape for a in arrays):
            raise DimensionError(f"shape mismatch in block {name}")
        acc = arrays[0].copy()
        same = np.ones(acc.shape, dtype=bool)
        for a in arrays[1:]:
            acc = acc + a
            same &= a == arrays[0]
        blocks.append(np.where(same, arrays[0], acc / len(arrays)))
    return ModelParams(*blocks)


def _labels_for_epoch(params: ModelParams, X: np.ndarray, cfg: FederationConfig, bmd: ad.BMDState | None):
    if cfg.labeler == "bmd":
        protos = ad.bmd_prototypes(params, X, bmd)
    else:
        protos = ad.compute_prototypes(params, X, refine=cfg.refine_prototypes)
    return ad.assign_pseudo_labels(protos, params, X).labels


def client_update(
    broadcast: ModelParams,
    client: UnlabeledView,
    cfg: FederationConfig,
    rng: RngStream,
    server: ModelParams | None = None,
) -> ClientResult:
    """E local epochs of SGD on the client objective, starting from ``broadcast``.

    ``server`` is the frozen round-start global model used for server alignment;
    alignment terms are only active for the fedscal method.
    """
    X = client.features
    n = X.shape[0]
    align = cfg.method == "fedscal"
    state = cfg.threshold_state()
    if align and cfg.scal.adaptive_threshold:
        state = ad.update_threshold(state, broadcast, X)
    tau = state.tau
    bmd = cfg.bmd_state() if cfg.labeler == "bmd" else None

    params = broadcast
    result = ClientResult(client.client_id, params, tau, state.gamma)
    for epoch in range(cfg.local_epochs):
        labels = _labels_for_epoch(params, X, cfg, bmd)
        result.pseudo_labels.append(labels)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = X[idx]
            if align:
                batch = ad.alignment_batch(params, server, xb, tau, cfg.aug, rng)
            else:
                batch = None
                ad.augment_pair(xb, cfg.aug, rng)  # keep draws aligned with the alignment path
            if bmd is not None:
                spec = ad.bmd_loss(params, xb, labels[idx], bmd)
            else:
                spec = ad.loa_loss_targets(labels[idx], cfg.scal.beta)
            if align:
                spec = _with_alignment(spec, batch, cfg.scal)
            res = loss_and_encoder_grad(params, xb, spec)
            if not np.isfinite(res.loss):
                raise FederationError(f"client {client.client_id}: non-finite loss at epoch {epoch}, batch offset {start}")
            params = params.sgd_step(res.grad, cfg.lr)
            comps = dict(res.components)
            comps["total"] = res.loss
            result.batches.append(
                BatchRecord(
                    epoch,
                    idx,
                    comps,
                    batch.local_targets if batch is not None else None,
                    batch.global_targets if batch is not None else None,
                )
            )
    result.params = params
    return result


def _with_alignment(spec: LossSpec, batch: ad.AlignmentBatch, scal: ad.SCAlConfig) -> LossSpec:
    if scal.lambda_local == 0 and scal.lambda_global == 0:
        return spec
    return ad.scal_loss_spec(spec, batch, scal)


def _drift(a: ModelParams, b: ModelParams) -> float:
    return float(np.linalg.norm(a.flat() - b.flat()))


Evaluator = Callable[[RoundRecord, ModelParams, dict, dict], None]


def run_federation(
    cfg: FederationConfig,
    clients: Sequence[UnlabeledView],
    init: ModelParams,
    evaluator: Evaluator | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    state: ServerState | None = None,
) -> ServerState:
    """Run ``cfg.rounds`` communication rounds (or the remainder, when resuming from ``state``).

    ``evaluator(record, global_params, local_params, client_results)`` may attach
    label-dependent metrics to each round record; adaptation code never sees labels.
    """
    K = len(clients)
    if K == 0:
        raise ValueError("no clients")
    if state is None:
        state = ServerState(0, init)
        if cfg.method == "loa":
            state.local_params = {c.client_id: init for c in clients}
    by_id = {c.client_id: c for c in clients}
    Q = cfg.num_sampled(K)

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(state.round + 1, cfg.rounds + 1):
            if cfg.method == "loa":
                sampled = sorted(by_id)
            else:
                picks = RngStream(cfg.seed, (STREAM_SAMPLING, r)).choice(K, Q)
                sampled = sorted(clients[i].client_id for i in picks)

            def job(cid: int) -> ClientResult:
                start = state.local_params[cid] if cfg.method == "loa" else state.params
                server = state.params if cfg.method == "fedscal" else None
                try:
                    return client_update(start, by_id[cid], cfg, RngStream(cfg.seed, (STREAM_CLIENT, cid, r)), server)
                except FederationError:
                    raise
                except (ArithmeticError, ValueError, RuntimeError) as exc:
                    raise FederationError(f"round {r}, client {cid}: {exc}") from exc

            results = list(pool.map(job, sampled)) if pool else [job(cid) for cid in sampled]
            for res in results:
                if not res.params.is_finite():
                    raise FederationError(f"non-finite parameters from client {res.client_id} in round {r}")

            record = RoundRecord(round=r, sampled=list(sampled))
            for res in results:
                record.tau[res.client_id] = res.tau
                record.gamma[res.client_id] = res.gamma
                record.losses[res.client_id] = res.mean_components()
            if cfg.method == "loa":
                record.drift = float(np.mean([_drift(res.params, state.local_params[res.client_id]) for res in results]))
                for res in results:
                    state.local_params[res.client_id] = res.params
                new_global = state.params
            else:
                record.drift = float(np.mean([_drift(res.params, state.params) for res in results]))
                new_global = server_aggregate([res.params for res in results])
            if evaluator is not None:
                evaluator(record, new_global, state.local_params, {res.client_id: res for res in results})
            state.params = new_global
            state.round = r
            state.history.append(record)
            if checkpoint_dir is not None and checkpoint_every > 0 and r % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_dir)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def save_checkpoint(state: ServerState, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(state.params, directory / "global")
    for cid, p in state.local_params.items():
        save_params(p, directory / f"client{cid}")
    manifest = {
        "round": state.round,
        "local_clients": sorted(state.local_params),
        "history": [rec.to_json() for rec in state.history],
    }
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> ServerState:
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    return ServerState(
        round=manifest["round"],
        params=load_params(directory / "global"),
        history=[RoundRecord.from_json(row) for row in manifest["history"]],
        local_params={cid: load_params(directory / f"client{cid}") for cid in manifest["local_clients"]},
    )
