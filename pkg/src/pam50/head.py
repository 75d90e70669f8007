"""Trainable classification head over frozen patch embeddings.

Architecture: FC(512->256) + ReLU -> batch norm -> dropout(0.5) -> FC(256->C)
-> softmax. Trained with class-weighted cross-entropy and Adam; epistemic
uncertainty comes from repeated stochastic forward passes with dropout kept
active ("mc" mode), scored as the mean per-class variance of the softmax
outputs.

All math is plain numpy so gradients can be checked against finite
differences in 64-bit mode; the runtime default is float32.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    EmptyAfterFilterError,
    InputError,
    TruncatedStoreError,
    UsageError,
    VersionMismatchError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PHED_MAGIC = b"PHED"
PHED_VERSION = 1

_PARAM_FIELDS = ("W1", "b1", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var", "W2", "b2")
_TRAINABLE = ("W1", "b1", "bn_gamma", "bn_beta", "W2", "b2")


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.5

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]

    @property
    def dtype(self):
        return self.W1.dtype

    def copy(self) -> "HeadParams":
        return HeadParams(
            **{name: getattr(self, name).copy() for name in _PARAM_FIELDS},
            dropout_rate=self.dropout_rate,
        )

    def astype(self, dtype) -> "HeadParams":
        return HeadParams(
            **{name: getattr(self, name).astype(dtype) for name in _PARAM_FIELDS},
            dropout_rate=self.dropout_rate,
        )


def init_head_params(
    in_dim: int = 512,
    hidden: int = 256,
    n_classes: int = 4,
    dropout_rate: float = 0.5,
    seed: int = 0,
    dtype=np.float32,
) -> HeadParams:
    if not 0.0 <= dropout_rate < 1.0:
        raise UsageError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((in_dim, hidden)) * math.sqrt(2.0 / in_dim)
    w2 = rng.standard_normal((hidden, n_classes)) * math.sqrt(1.0 / hidden)
    return HeadParams(
        W1=w1.astype(dtype),
        b1=np.zeros(hidden, dtype=dtype),
        bn_gamma=np.ones(hidden, dtype=dtype),
        bn_beta=np.zeros(hidden, dtype=dtype),
        bn_running_mean=np.zeros(hidden, dtype=dtype),
        bn_running_var=np.ones(hidden, dtype=dtype),
        W2=w2.astype(dtype),
        b2=np.zeros(n_classes, dtype=dtype),
        dropout_rate=dropout_rate,
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def batchnorm_eval(params: HeadParams, activations: np.ndarray) -> np.ndarray:
    """Eval-mode batch norm: a fixed affine map given frozen running stats."""
    inv_std = 1.0 / np.sqrt(params.bn_running_var + BN_EPS)
    return params.bn_gamma * (activations - params.bn_running_mean) * inv_std + params.bn_beta


def forward(
    params: HeadParams,
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_mask: np.ndarray | None = None,
    return_cache: bool = False,
):
    """Probabilities (batch x C) for a batch of embeddings.

    Modes: ``train`` uses batch statistics and samples a dropout mask (and
    updates running stats); ``eval`` uses running statistics, no dropout;
    ``mc`` uses running statistics with a sampled dropout mask (inverted
    scaling, so eval needs no rescaling).
    """
    if mode not in ("train", "eval", "mc"):
        raise UsageError(f"unknown forward mode {mode!r}")
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DataError(f"batch shape {x.shape} does not match input dim {params.in_dim}")
    x = x.astype(params.dtype, copy=False)

    h1 = x @ params.W1 + params.b1
    a = np.maximum(h1, 0.0)

    if mode == "train":
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mu) * inv_std
        params.bn_running_mean = (
            (1.0 - BN_MOMENTUM) * params.bn_running_mean + BN_MOMENTUM * mu
        ).astype(params.dtype)
        params.bn_running_var = (
            (1.0 - BN_MOMENTUM) * params.bn_running_var + BN_MOMENTUM * var
        ).astype(params.dtype)
    else:
        inv_std = 1.0 / np.sqrt(params.bn_running_var + BN_EPS)
        xhat = (a - params.bn_running_mean) * inv_std
    bn = params.bn_gamma * xhat + params.bn_beta

    p = params.dropout_rate
    if mode == "eval" or p == 0.0:
        keep = None
        d = bn
    else:
        if dropout_mask is not None:
            keep = dropout_mask
        else:
            if rng is None:
                raise UsageError(f"mode {mode!r} with dropout_rate > 0 needs an rng or mask")
            keep = rng.random(bn.shape) >= p
        d = bn * keep / (1.0 - p)

    logits = d @ params.W2 + params.b2
    probs = _softmax(logits)
    if not return_cache:
        return probs
    cache = {
        "x": x, "h1": h1, "xhat": xhat, "inv_std": inv_std,
        "keep": keep, "d": d, "probs": probs, "mode": mode,
    }
    return probs, cache


def loss_and_grads(
    params: HeadParams,
    batch: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray,
    rng: np.random.Generator | None = None,
):
    """Weighted cross-entropy and exact gradients through the training graph.

    The forward runs in train mode (batch statistics); dropout is sampled
    from ``rng`` when given, otherwise skipped.
    """
    y = np.asarray(labels)
    if y.ndim != 1 or len(y) != len(batch):
        raise DataError("labels must be one integer per batch row")
    if np.any((y < 0) | (y >= params.n_classes)):
        raise DataError(f"labels must be in [0, {params.n_classes})")
    w = np.asarray(class_weights, dtype=params.dtype)
    if w.shape != (params.n_classes,):
        raise DataError(f"need {params.n_classes} class weights, got {w.shape}")

    probs, cache = forward(params, batch, mode="train", rng=rng, return_cache=True)
    n = len(y)
    sample_w = w[y]
    logp = np.log(np.clip(probs[np.arange(n), y], 1e-300, None))
    per_sample = -sample_w * logp
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise DataError(f"non-finite loss contribution at batch index {bad}")
    loss = float(per_sample.mean())

    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= (sample_w / n)[:, None]

    d = cache["d"]
    grads = {
        "W2": d.T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }
    dd = dlogits @ params.W2.T
    if cache["keep"] is not None:
        dbn = dd * cache["keep"] / (1.0 - params.dropout_rate)
    else:
        dbn = dd
    xhat = cache["xhat"]
    grads["bn_gamma"] = (dbn * xhat).sum(axis=0)
    grads["bn_beta"] = dbn.sum(axis=0)

    dxhat = dbn * params.bn_gamma
    inv_std = cache["inv_std"]
    da = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
    )
    dh1 = da * (cache["h1"] > 0)
    grads["W1"] = cache["x"].T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    return loss, grads


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam_state(params: HeadParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(getattr(params, k)) for k in _TRAINABLE},
        v={k: np.zeros_like(getattr(params, k)) for k in _TRAINABLE},
    )


def adam_step(
    params: HeadParams,
    grads: dict,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Bias-corrected Adam update, applied in place; returns (params, state)."""
    state.t += 1
    t = state.t
    for key in _TRAINABLE:
        g = grads[key]
        state.m[key] = beta1 * state.m[key] + (1.0 - beta1) * g
        state.v[key] = beta2 * state.v[key] + (1.0 - beta2) * g * g
        m_hat = state.m[key] / (1.0 - beta1**t)
        v_hat = state.v[key] / (1.0 - beta2**t)
        arr = getattr(params, key)
        arr -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(arr.dtype)
    return params, state


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    class_weights: Sequence[float] | None = None
    seed: int = 0
    hidden: int = 256
    n_classes: int = 4
    dropout_rate: float = 0.5
    feature_jitter: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise UsageError("learning_rate, batch_size and max_epochs must be positive")
        if self.patience < 0:
            raise UsageError("patience must be >= 0")


def default_class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """w_c = N_total / (C * N_c); classes absent from the data get weight 0."""
    counts = np.bincount(np.asarray(labels), minlength=n_classes).astype(np.float64)
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = len(labels) / (n_classes * counts[present])
    return weights


def accuracy(params: HeadParams, x: np.ndarray, y: np.ndarray) -> float:
    probs = forward(params, x, mode="eval")
    return float((probs.argmax(axis=1) == np.asarray(y)).mean())


def train_head(
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
) -> tuple[HeadParams, list[dict]]:
    """Minibatch Adam training with early stopping on validation accuracy.

    Returns the parameters of the best validation epoch and a history of
    ``{"epoch", "train_loss", "val_accuracy"}`` rows.
    """
    x_train, y_train = np.asarray(train_set[0]), np.asarray(train_set[1])
    x_val, y_val = np.asarray(val_set[0]), np.asarray(val_set[1])
    if len(x_train) == 0 or len(x_val) == 0:
        raise InputError("train and validation sets must be nonempty")

    if config.class_weights is not None:
        weights = np.asarray(config.class_weights, dtype=np.float64)
    else:
        weights = default_class_weights(y_train, config.n_classes)

    params = init_head_params(
        in_dim=x_train.shape[1],
        hidden=config.hidden,
        n_classes=config.n_classes,
        dropout_rate=config.dropout_rate,
        seed=np.random.SeedSequence([config.seed, 0]),
    )
    state = init_adam_state(params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    jitter_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))

    history: list[dict] = []
    best_acc = -np.inf
    best_params = params.copy()
    since_improve = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x_train[idx]
            if config.feature_jitter > 0:
                xb = xb + config.feature_jitter * jitter_rng.standard_normal(xb.shape)
            loss, grads = loss_and_grads(params, xb, y_train[idx], weights, rng=dropout_rng)
            adam_step(params, grads, state, lr=config.learning_rate)
            losses.append(loss)
        val_acc = accuracy(params, x_val, y_val)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": val_acc}
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve > config.patience:
                break
    return best_params, history


@dataclass
class UncertaintyReport:
    patch_id: int
    class_variances: np.ndarray
    u: float
    T: int


def uncertainty_from_probs(prob_stack: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class unbiased variance across passes and its mean (the u score)."""
    stack = np.asarray(prob_stack, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] < 2:
        raise UsageError("need at least T=2 probability rows for a variance")
    class_var = stack.var(axis=0, ddof=1)
    return class_var, float(class_var.mean())


def mc_uncertainty(
    params: HeadParams,
    embedding: np.ndarray,
    T: int = 20,
    seed=0,
    patch_id: int = 0,
) -> UncertaintyReport:
    """T stochastic mc-mode passes with independent seeded dropout masks."""
    if T < 2:
        raise UsageError(f"T must be >= 2 for a variance estimate, got {T}")
    rng = np.random.default_rng(seed)
    x = np.asarray(embedding, dtype=params.dtype).reshape(1, -1)
    rows = [forward(params, x, mode="mc", rng=rng)[0] for _ in range(T)]
    class_var, u = uncertainty_from_probs(np.stack(rows))
    return UncertaintyReport(patch_id=patch_id, class_variances=class_var, u=u, T=T)


def mc_uncertainty_batch(
    params: HeadParams,
    embeddings: np.ndarray,
    patch_ids: Sequence[int],
    T: int = 20,
    base_seed: int = 0,
) -> list[UncertaintyReport]:
    """Batched mc passes; per patch identical to mc_uncertainty with the
    stream seeded by (base_seed, patch_id)."""
    if T < 2:
        raise UsageError(f"T must be >= 2 for a variance estimate, got {T}")
    x = np.asarray(embeddings, dtype=params.dtype)
    n, h = len(patch_ids), params.hidden
    p = params.dropout_rate
    if p > 0:
        keeps = np.empty((T, n, h), dtype=bool)
        for i, pid in enumerate(patch_ids):
            rng = np.random.default_rng(np.random.SeedSequence([int(base_seed), int(pid)]))
            keeps[:, i, :] = rng.random((T, h)) >= p
    stack = np.empty((T, n, params.n_classes))
    for t in range(T):
        mask = keeps[t] if p > 0 else None
        stack[t] = forward(params, x, mode="mc", dropout_mask=mask)
    reports = []
    for i, pid in enumerate(patch_ids):
        class_var, u = uncertainty_from_probs(stack[:, i, :])
        reports.append(UncertaintyReport(patch_id=int(pid), class_variances=class_var, u=u, T=T))
    return reports


@dataclass
class FilterPolicy:
    """Exactly one of an absolute threshold or a keep-fraction."""

    tau: float | None = None
    keep_fraction: float | None = None

    def __post_init__(self):
        if (self.tau is None) == (self.keep_fraction is None):
            raise UsageError("set exactly one of tau / keep_fraction")
        if self.keep_fraction is not None and not 0.0 < self.keep_fraction <= 1.0:
            raise UsageError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")


def filter_by_uncertainty(
    reports: Sequence[UncertaintyReport],
    policy: FilterPolicy,
) -> list[int]:
    """Patch ids surviving the uncertainty filter, in input order."""
    if not reports:
        raise InputError("filter_by_uncertainty needs a nonempty report list")
    if policy.tau is not None:
        kept = [r.patch_id for r in reports if r.u <= policy.tau]
    else:
        k = math.ceil(policy.keep_fraction * len(reports))
        ranked = sorted(reports, key=lambda r: (r.u, r.patch_id))
        keep_ids = {r.patch_id for r in ranked[:k]}
        kept = [r.patch_id for r in reports if r.patch_id in keep_ids]
    if not kept:
        raise EmptyAfterFilterError(
            f"tau={policy.tau} removed all {len(reports)} patches; "
            "fall back to keep_fraction=1.0"
        )
    return kept


def save_head(params: HeadParams, path: str | Path) -> None:
    """Versioned binary head file (magic PHED); arrays stored float32 LE."""
    header = struct.pack(
        "<4sIIIIf",
        PHED_MAGIC,
        PHED_VERSION,
        params.n_classes,
        params.in_dim,
        params.hidden,
        float(params.dropout_rate),
    )
    payload = b"".join(
        np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes()
        for name in _PARAM_FIELDS
    )
    Path(path).write_bytes(header + payload)


def load_head(path: str | Path) -> HeadParams:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != PHED_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    head_fmt = "<4sIIIIf"
    size = struct.calcsize(head_fmt)
    if len(blob) < size:
        raise TruncatedStoreError(f"{path}: header truncated")
    _, version, n_classes, in_dim, hidden, dropout_rate = struct.unpack_from(head_fmt, blob)
    if version != PHED_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {PHED_VERSION}")
    shapes = {
        "W1": (in_dim, hidden),
        "b1": (hidden,),
        "bn_gamma": (hidden,),
        "bn_beta": (hidden,),
        "bn_running_mean": (hidden,),
        "bn_running_var": (hidden,),
        "W2": (hidden, n_classes),
        "b2": (n_classes,),
    }
    offset = size
    arrays = {}
    for name in _PARAM_FIELDS:
        count = int(np.prod(shapes[name]))
        end = offset + 4 * count
        if len(blob) < end:
            raise TruncatedStoreError(f"{path}: payload truncated in {name}")
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .reshape(shapes[name])
            .copy()
        )
        offset = end
    if len(blob) != offset:
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return HeadParams(**arrays, dropout_rate=float(dropout_rate))


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy"])
        for row in history:
            writer.writerow(
                [row["epoch"], f"{row['train_loss']:.8f}", f"{row['val_accuracy']:.6f}"]
            )
