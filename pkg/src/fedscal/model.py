"""One-hidden-layer tanh encoder with a frozen linear classifier head.

All gradients are derived by hand; ``numerics.finite_diff_grad`` checks them in the tests.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numerics import EPS, DimensionError, RngStream, safe_log, softmax


class TrainingError(RuntimeError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelParams:
    enc_w: np.ndarray  # (h, d)
    enc_b: np.ndarray  # (h,)
    cls_w: np.ndarray  # (J, h), frozen during adaptation
    cls_b: np.ndarray  # (J,), frozen during adaptation

    def __post_init__(self):
        for name in ("enc_w", "enc_b", "cls_w", "cls_b"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        h, d = self.enc_w.shape
        if self.enc_b.shape != (h,) or self.cls_w.shape[1] != h or self.cls_b.shape != (self.cls_w.shape[0],):
            raise DimensionError("inconsistent parameter shapes")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d, h, J)."""
        return self.enc_w.shape[1], self.enc_w.shape[0], self.cls_w.shape[0]

    def encoder_vector(self) -> np.ndarray:
        return np.concatenate([self.enc_w.ravel(), self.enc_b])

    def with_encoder_vector(self, flat: np.ndarray) -> ModelParams:
        h, d = self.enc_w.shape
        flat = np.asarray(flat, dtype=np.float64)
        return ModelParams(flat[: h * d].reshape(h, d), flat[h * d :], self.cls_w, self.cls_b)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.enc_w.ravel(), self.enc_b, self.cls_w.ravel(), self.cls_b])

    def head_hash(self) -> str:
        return hashlib.sha256(self.cls_w.astype("<f8").tobytes() + self.cls_b.astype("<f8").tobytes()).hexdigest()

    def content_hash(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def sgd_step(self, grad: EncoderGrad, lr: float) -> ModelParams:
        return ModelParams(self.enc_w - lr * grad.enc_w, self.enc_b - lr * grad.enc_b, self.cls_w, self.cls_b)


def init_params(d: int, h: int, J: int, rng: RngStream) -> ModelParams:
    return ModelParams(
        enc_w=rng.normal((h, d)) / np.sqrt(d),
        enc_b=np.zeros(h),
        cls_w=rng.normal((J, h)) / np.sqrt(h),
        cls_b=np.zeros(J),
    )


class ForwardCache(NamedTuple):
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def forward(params: ModelParams, x) -> ForwardCache:
    """Forward pass for a single vector (d,) or a batch (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    d = params.enc_w.shape[1]
    if X.ndim != 2 or X.shape[1] != d:
        raise DimensionError(f"expected inputs of dimension {d}, got shape {x.shape}")
    pre = X @ params.enc_w.T + params.enc_b
    hidden = np.tanh(pre)
    logits = hidden @ params.cls_w.T + params.cls_b
    probs = softmax(logits)
    if single:
        return ForwardCache(x, pre[0], hidden[0], logits[0], probs[0])
    return ForwardCache(X, pre, hidden, logits, probs)


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, np.atleast_2d(X)).probs, axis=1)


def accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(params, X) == y))


@dataclass(frozen=True)
class EncoderGrad:
    enc_w: np.ndarray
    enc_b: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.enc_w.ravel(), self.enc_b])


@dataclass
class LossSpec:
    """Weights and fixed targets for one mini-batch of the client objective.

    ``strong`` holds the strongly augmented batch; alignment targets are class
    indices with -1 marking samples that did not pass the confidence gate.
    ``pce`` is the pseudo-label cross-entropy weight (beta, or alpha for BMD).
    """

    ent: float = 0.0
    div: float = 0.0
    pce: float = 0.0
    pseudo_labels: np.ndarray | None = None
    local: float = 0.0
    glob: float = 0.0
    strong: np.ndarray | None = None
    local_targets: np.ndarray | None = None
    global_targets: np.ndarray | None = None
    dyn: float = 0.0
    dyn_targets: np.ndarray | None = None


class LossResult(NamedTuple):
    loss: float
    grad: EncoderGrad
    components: dict


def _softmax_backward(P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    return P * (dP - np.sum(P * dP, axis=1, keepdims=True))


def _encoder_backward(params: ModelParams, cache: ForwardCache, dZ: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dG = dZ @ params.cls_w
    dA = dG * (1.0 - cache.hidden**2)
    return dA.T @ cache.x, dA.sum(axis=0)


def _gated_ce(Q: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray, int]:
    """Mean over gated rows of KL(one-hot || q) = -log q_y, and its gradient w.r.t. Q."""
    gated = np.flatnonzero(targets >= 0)
    dQ = np.zeros_like(Q)
    if gated.size == 0:
        return 0.0, dQ, 0
    q = Q[gated, targets[gated]]
    value = float(np.mean(-safe_log(q)))
    dQ[gated, targets[gated]] = np.where(q > EPS, -1.0 / (gated.size * q), 0.0)
    return value, dQ, int(gated.size)


def loss_and_encoder_grad(params: ModelParams, X: np.ndarray, spec: LossSpec) -> LossResult:
    """Weighted client objective on one batch and its gradient w.r.t. encoder parameters only.

    Components with zero weight are skipped entirely, so they contribute neither
    value nor floating-point noise.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DimensionError("empty batch")
    B = X.shape[0]
    clean = forward(params, X)
    P = clean.probs
    dP = np.zeros_like(P)
    total = 0.0
    comps: dict[str, float] = {}

    if spec.ent:
        logp = safe_log(P)
        val = float(np.mean(-np.sum(P * logp, axis=1)))
        dP += spec.ent * (-(logp + (P > EPS)) / B)
        comps["ent"] = val
        total += spec.ent * val
    if spec.div:
        pbar = P.mean(axis=0)
        val = float(np.sum(pbar * safe_log(pbar)))
        dP += spec.div * ((safe_log(pbar) + (pbar > EPS)) / B)[None, :]
        comps["div"] = val
        total += spec.div * val
    if spec.pce:
        y = np.asarray(spec.pseudo_labels)
        if y.shape != (B,):
            raise DimensionError("pseudo-label count does not match batch")
        py = P[np.arange(B), y]
        val = float(np.mean(-safe_log(py)))
        dP[np.arange(B), y] += spec.pce * np.where(py > EPS, -1.0 / (B * py), 0.0)
        comps["pce"] = val
        total += spec.pce * val
    if spec.dyn:
        T = np.asarray(spec.dyn_targets, dtype=np.float64)
        if T.shape != P.shape:
            raise DimensionError("dynamic targets do not match batch")
        logp = safe_log(P)
        logt = safe_log(T)
        val = float(np.mean(-np.sum(T * logp, axis=1) - np.sum(P * logt, axis=1)))
        dP += spec.dyn * ((-T * (P > EPS) / np.maximum(P, EPS)) - logt) / B
        comps["dyn"] = val
        total += spec.dyn * val

    dZ = _softmax_backward(P, dP)
    gw, gb = _encoder_backward(params, clean, dZ)

    if spec.local or spec.glob:
        S = np.atleast_2d(np.asarray(spec.strong, dtype=np.float64))
        if S.shape != X.shape:
            raise DimensionError("strong batch does not match batch")
        strong = forward(params, S)
        dQ = np.zeros_like(strong.probs)
        if spec.local:
            val, g, n = _gated_ce(strong.probs, np.asarray(spec.local_targets))
            dQ += spec.local * g
            comps["local"] = val
            comps["local_gated"] = n
            total += spec.local * val
        if spec.glob:
            val, g, n = _gated_ce(strong.probs, np.asarray(spec.global_targets))
            dQ += spec.glob * g
            comps["global"] = val
            comps["global_gated"] = n
            total += spec.glob * val
        sw, sb = _encoder_backward(params, strong, _softmax_backward(strong.probs, dQ))
        gw = gw + sw
        gb = gb + sb

    return LossResult(total, EncoderGrad(gw, gb), comps)


def cross_entropy_full_grad(params: ModelParams, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and gradients for every parameter block (source training only)."""
    cache = forward(params, X)
    B = X.shape[0]
    py = cache.probs[np.arange(B), y]
    loss = float(np.mean(-safe_log(py)))
    dZ = cache.probs.copy()
    dZ[np.arange(B), y] -= 1.0
    dZ /= B
    g_cw = dZ.T @ cache.hidden
    g_cb = dZ.sum(axis=0)
    g_ew, g_eb = _encoder_backward(params, cache, dZ)
    return loss, (g_ew, g_eb, g_cw, g_cb)


def pretrain_source(
    X: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch: int,
    rng: RngStream,
    hidden: int = 32,
    num_classes: int | None = None,
) -> tuple[ModelParams, float]:
    """Full-model SGD on mean cross-entropy. Returns the source model and its training accuracy."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    J = num_classes or int(y.max()) + 1
    params = init_params(X.shape[1], hidden, J, rng)
    n = X.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, (g_ew, g_eb, g_cw, g_cb) = cross_entropy_full_grad(params, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite source loss at epoch {epoch}, batch offset {start}: {loss}")
            params = ModelParams(
                params.enc_w - lr * g_ew,
                params.enc_b - lr * g_eb,
                params.cls_w - lr * g_cw,
                params.cls_b - lr * g_cb,
            )
    return params, accuracy(params, X, y)


def save_params(params: ModelParams, path: str | Path) -> None:
    """Write ``<path>.bin`` (little-endian float64 stream) and ``<path>.json`` (shapes + hash)."""
    path = Path(path)
    blob = params.flat().astype("<f8").tobytes()
    path.with_suffix(".bin").write_bytes(blob)
    d, h, J = params.dims
    meta = {
        "format": "fedscal-params-v1",
        "shapes": {"enc_w": [h, d], "enc_b": [h], "cls_w": [J, h], "cls_b": [J]},
        "order": ["enc_w", "enc_b", "cls_w", "cls_b"],
        "sha256": hashlib.sha256(blob).hexdigest(),
        "head_sha256": params.head_hash(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_params(path: str | Path) -> ModelParams:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise ValueError(f"content hash mismatch for {path}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    blocks = {}
    offset = 0
    for name in meta["order"]:
        shape = tuple(meta["shapes"][name])
        size = int(np.prod(shape))
        blocks[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ValueError(f"parameter stream length mismatch for {path}")
    return ModelParams(**blocks)
