"""From-scratch dense network predicting the per-clip lambda scale.

Architecture (layer widths, first to last): 1000, 800, 600, 200, 100, 64,
32, 16, 8, 4, 1 on top of the feature width, batch normalization on layers
1, 2 and 11, dropout 0.1 on layers 1, 2, 3 and 8, GELU activation on every
layer. Batch norm on the final scalar layer is unusual but implemented as
specified; `final_batch_norm=False` disables it and the choice is recorded
in model metadata. Training is SGD with momentum on mean absolute error.

Everything here is hand-rolled on numpy: forward, backward, the optimizer
and serialization. GELU uses the exact erf form x * Phi(x) so gradient
checks need no approximation tolerance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .features import (
    FeatureLayoutMismatch,
    NormStats,
    SemanticFeatures,
    StatsLog,
    apply_norm,
    assemble_features,
    fit_norm_stats,
)

TABLE_SIZES = (1000, 800, 600, 200, 100, 64, 32, 16, 8, 4, 1)
TABLE_BN_LAYERS = (1, 2, 11)  # 1-based layer indices
TABLE_DROPOUT_LAYERS = (1, 2, 3, 8)
TABLE_DROPOUT_RATE = 0.1

K_CLAMP_LOW = 0.2
K_CLAMP_HIGH = 3.0

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

MODEL_LAYOUT_VERSION = 1


class MLPError(RuntimeError):
    pass


class DimensionMismatch(MLPError):
    pass


class EmptyDataset(MLPError):
    pass


class NonFiniteLoss(MLPError):
    pass


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x) with the Gaussian CDF via erf."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx gelu(x) = Phi(x) + x * phi(x)."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


class Dense:
    """Affine layer y = x @ w + b, w shaped (fan_in, fan_out)."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "Dense":
        bound = 1.0 / math.sqrt(fan_in)
        return cls(
            w=rng.uniform(-bound, bound, size=(fan_in, fan_out)),
            b=np.zeros(fan_out),
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w + self.b

    def backward(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.gw = x.T @ grad
        self.gb = grad.sum(axis=0)
        return grad @ self.w.T

    def params(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]


class BatchNorm:
    """Batch normalization over the batch axis with EMA running statistics.

    Train mode normalizes by batch mean and biased variance and (unless told
    otherwise) folds them into the running estimates with keep-rate
    `momentum`. Infer mode uses the running estimates only, making inference
    a pure function of the parameters.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum
        self.ggamma = np.zeros(dim)
        self.gbeta = np.zeros(dim)

    def forward_train(self, x: np.ndarray, update_stats: bool = True):
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        if update_stats:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mu
            self.running_var = m * self.running_var + (1.0 - m) * var
        return self.gamma * xhat + self.beta, (xhat, inv_std)

    def forward_infer(self, x: np.ndarray) -> np.ndarray:
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        return self.gamma * (x - self.running_mean) * inv_std + self.beta

    def backward(self, cache, grad: np.ndarray) -> np.ndarray:
        xhat, inv_std = cache
        n = grad.shape[0]
        self.ggamma = (grad * xhat).sum(axis=0)
        self.gbeta = grad.sum(axis=0)
        dxhat = grad * self.gamma
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def params(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]


class _Block:
    """One network layer: dense, optional batch norm, GELU, optional dropout."""

    def __init__(self, dense: Dense, bn: BatchNorm | None, activation: bool, dropout: float):
        self.dense = dense
        self.bn = bn
        self.activation = activation
        self.dropout = dropout


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    rng_seed: int = 0
    bn_momentum: float = 0.9
    split_fraction: float = 0.7  # corpus-level convention, recorded for audit
    target_train_mae: float | None = None  # stop early once reached

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (self.learning_rate > 0 and 0.0 <= self.momentum < 1.0):
            raise ValueError("need learning_rate > 0 and momentum in [0, 1)")


@dataclass(frozen=True)
class TrainReport:
    epochs_run: int
    train_mae: tuple[float, ...]  # per epoch, infer-mode over the training set
    val_mae: tuple[float, ...] | None
    final_train_mae: float
    stopped_early: bool
    config: TrainConfig = field(repr=False)


class MLPModel:
    """Dense GELU network with explicit forward/backward passes.

    `sizes` are per-layer output widths; `bn_layers` and `dropout_layers`
    are 1-based layer indices. Modes: "infer" (running BN stats, no dropout,
    pure), "train" (batch BN stats + running update, dropout active), and
    "check" (batch BN stats, no state mutation, no dropout) for gradient
    verification.
    """

    def __init__(
        self,
        input_dim: int,
        sizes: Sequence[int] = TABLE_SIZES,
        bn_layers: Sequence[int] = TABLE_BN_LAYERS,
        dropout_layers: Sequence[int] = TABLE_DROPOUT_LAYERS,
        dropout_rate: float = TABLE_DROPOUT_RATE,
        seed: int = 0,
        activation: bool = True,
        final_batch_norm: bool = True,
        bn_momentum: float = 0.9,
    ):
        if input_dim < 1 or len(sizes) < 1:
            raise DimensionMismatch("need input_dim >= 1 and at least one layer")
        self.input_dim = int(input_dim)
        self.sizes = tuple(int(s) for s in sizes)
        bn_set = set(int(i) for i in bn_layers)
        if not final_batch_norm:
            bn_set.discard(len(self.sizes))
        self.bn_layers = tuple(sorted(bn_set))
        self.dropout_layers = tuple(sorted(set(int(i) for i in dropout_layers)))
        self.dropout_rate = float(dropout_rate)
        self.seed = int(seed)
        self.activation = bool(activation)
        self.norm_stats: NormStats | None = None
        self.semantics_used = False
        self.metadata: dict = {
            "layout_version": MODEL_LAYOUT_VERSION,
            "layer_order": "dense -> batch_norm -> gelu -> dropout",
            "gelu": "exact erf",
            "init": "uniform(-1, 1) / sqrt(fan_in), zero bias",
            "final_batch_norm": len(self.sizes) in bn_set,
            "bn_momentum": bn_momentum,
        }

        rng = np.random.default_rng([self.seed, 0x11A9E8])
        self.blocks: list[_Block] = []
        fan_in = self.input_dim
        for i, width in enumerate(self.sizes, start=1):
            dense = Dense.init(fan_in, width, rng)
            bn = BatchNorm(width, momentum=bn_momentum) if i in bn_set else None
            drop = self.dropout_rate if i in self.dropout_layers else 0.0
            self.blocks.append(_Block(dense, bn, self.activation, drop))
            fan_in = width

    # -- forward / backward ------------------------------------------------

    def _coerce(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatch(
                f"expected input width {self.input_dim}, got shape {x.shape}"
            )
        return x, single

    def forward(
        self, x: np.ndarray, mode: str = "infer", rng: np.random.Generator | None = None
    ) -> np.ndarray:
        """Network output; (n,) for a batch, scalar for a single vector."""
        if mode not in ("infer", "train", "check"):
            raise ValueError(f"unknown mode {mode!r}")
        x, single = self._coerce(x)
        if mode == "infer":
            out = x
            for blk in self.blocks:
                out = blk.dense.forward(out)
                if blk.bn is not None:
                    out = blk.bn.forward_infer(out)
                if blk.activation:
                    out = gelu(out)
        else:
            out, _ = self._forward_training(x, mode, rng)
        out = out[:, -1] if out.shape[1] == 1 else out
        return float(out[0]) if single and out.ndim == 1 else out

    def _forward_training(
        self, x: np.ndarray, mode: str, rng: np.random.Generator | None
    ):
        """Batch-statistics forward pass; returns (output, caches)."""
        update = mode == "train"
        caches = []
        out = x
        for blk in self.blocks:
            cache: dict = {"x": out}
            out = blk.dense.forward(out)
            if blk.bn is not None:
                out, cache["bn"] = blk.bn.forward_train(out, update_stats=update)
            if blk.activation:
                cache["z"] = out
                out = gelu(out)
            if update and blk.dropout > 0.0:
                if rng is None:
                    raise MLPError("train mode with dropout needs an rng")
                mask = rng.random(out.shape) >= blk.dropout
                out = out * mask / (1.0 - blk.dropout)
                cache["mask"] = mask
            caches.append(cache)
        return out, caches

    def _backward(self, grad_out: np.ndarray, caches: list[dict]) -> None:
        """Backpropagate d(loss)/d(output); leaves grads on the layers."""
        grad = grad_out
        for blk, cache in zip(reversed(self.blocks), reversed(caches)):
            if "mask" in cache:
                grad = grad * cache["mask"] / (1.0 - blk.dropout)
            if blk.activation:
                grad = grad * gelu_grad(cache["z"])
            if blk.bn is not None:
                grad = blk.bn.backward(cache["bn"], grad)
            grad = blk.dense.backward(cache["x"], grad)

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, value, grad) triples in a stable order."""
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            for name, value, grad in blk.dense.params():
                out.append((f"layer{i}.{name}", value, grad))
            if blk.bn is not None:
                for name, value, grad in blk.bn.params():
                    out.append((f"layer{i}.bn.{name}", value, grad))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray | float:
        """Infer-mode forward pass (pure)."""
        return self.forward(x, mode="infer")


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - target)))


def train(
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    model: MLPModel | None = None,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
    semantics_used: bool = False,
) -> tuple[MLPModel, TrainReport]:
    """SGD-with-momentum training on mean absolute error.

    `x` holds raw (unnormalized) feature rows; standardization statistics
    are fitted here and stored on the model, so prediction-time inputs go
    through the same transform. The MAE subgradient at zero residual is 0.
    Fully deterministic for a fixed config: one generator drives shuffling
    and dropout in a fixed draw order.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise EmptyDataset("need a non-empty 2-D feature matrix")
    if y.shape != (x.shape[0],):
        raise DimensionMismatch(f"labels {y.shape} do not match features {x.shape}")
    if not np.all(np.isfinite(y)):
        raise NonFiniteLoss("labels contain non-finite values")

    norm = fit_norm_stats(x)
    xn = apply_norm(norm, x)
    if model is None:
        model = MLPModel(input_dim=x.shape[1], seed=cfg.rng_seed, bn_momentum=cfg.bn_momentum)
    model.norm_stats = norm
    model.semantics_used = semantics_used
    model.metadata["train_config"] = {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "batch_size": cfg.batch_size,
        "rng_seed": cfg.rng_seed,
        "bn_momentum": cfg.bn_momentum,
        "split_fraction": cfg.split_fraction,
        "loss": "mean absolute error",
    }

    if validation is not None:
        xv = apply_norm(norm, np.asarray(validation[0], dtype=np.float64))
        yv = np.asarray(validation[1], dtype=np.float64)

    rng = np.random.default_rng([cfg.rng_seed, 0x7EA1])
    n = x.shape[0]
    params = model.parameters()
    velocity = [np.zeros_like(p) for _, p, _ in params]

    train_curve: list[float] = []
    val_curve: list[float] = []
    stopped_early = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb, yb = xn[idx], y[idx]
            pred, caches = model._forward_training(xb, "train", rng)
            pred = pred[:, 0]
            diff = pred - yb
            if not np.all(np.isfinite(diff)):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}")
            grad = (np.sign(diff) / diff.shape[0])[:, None]
            model._backward(grad, caches)
            params = model.parameters()
            for v, (_, value, g) in zip(velocity, params):
                v *= cfg.momentum
                v += g
                value -= cfg.learning_rate * v

        epoch_mae = mae(model.predict(xn), y)
        if not math.isfinite(epoch_mae):
            raise NonFiniteLoss(f"non-finite train MAE at epoch {epoch}")
        train_curve.append(epoch_mae)
        if validation is not None:
            val_curve.append(mae(model.predict(xv), yv))
        if cfg.target_train_mae is not None and epoch_mae < cfg.target_train_mae:
            stopped_early = True
            break

    report = TrainReport(
        epochs_run=len(train_curve),
        train_mae=tuple(train_curve),
        val_mae=tuple(val_curve) if validation is not None else None,
        final_train_mae=train_curve[-1],
        stopped_early=stopped_early,
        config=cfg,
    )
    return model, report


# ---------------------------------------------------------------------------
# Gradient checking

def gradient_check(
    model: MLPModel,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-5,
    samples_per_param: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in "check" mode: batch-statistics batch norm without state updates,
    dropout off, so the loss is a pure function of the parameters. Labels
    that land within 1e-4 of the prediction are nudged away so the MAE kink
    (where the subgradient is ambiguous) is excluded. The relative error
    denominator is floored at 1e-3: roundoff noise on near-zero gradients
    would otherwise register as spurious failures, while genuine gradient
    bugs at meaningful magnitudes remain visible.
    """
    rng = rng or np.random.default_rng(0)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1).copy()
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatch("labels do not match batch")

    def loss() -> tuple[float, list[dict]]:
        out, caches = model._forward_training(x, "check", None)
        return float(np.mean(np.abs(out[:, 0] - y))), caches

    pred0, _ = model._forward_training(x, "check", None)
    near_kink = np.abs(pred0[:, 0] - y) < 1e-4
    y[near_kink] -= 0.05

    base, caches = loss()
    out0, _ = model._forward_training(x, "check", None)
    grad = (np.sign(out0[:, 0] - y) / y.shape[0])[:, None]
    model._backward(grad, caches)

    max_rel = 0.0
    for name, value, analytic in model.parameters():
        flat_v = value.reshape(-1)
        flat_g = analytic.reshape(-1)
        n_idx = min(samples_per_param, flat_v.size)
        idx = rng.choice(flat_v.size, size=n_idx, replace=False)
        for j in idx:
            orig = flat_v[j]
            flat_v[j] = orig + epsilon
            up, _ = loss()
            flat_v[j] = orig - epsilon
            down, _ = loss()
            flat_v[j] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(flat_g[j]), abs(numeric), 1e-3)
            max_rel = max(max_rel, abs(flat_g[j] - numeric) / denom)
    return max_rel


# ---------------------------------------------------------------------------
# Prediction

@dataclass(frozen=True)
class Prediction:
    k: float  # clamped to the legal scale range
    raw: float  # unclamped network output
    clamped: bool


def predict_k(
    model: MLPModel,
    stats: StatsLog,
    semantic: SemanticFeatures | None = None,
    detail: bool = False,
):
    """Predict the lambda scale for a clip from its stats log.

    The feature layout must match training: a model trained with semantic
    features refuses stats-only input and vice versa. Output is clamped to
    [0.2, 3]; `detail=True` also returns the raw value.
    """
    vec = assemble_features(stats, semantic)
    if vec.semantic_absent and model.semantics_used:
        raise FeatureLayoutMismatch("model was trained with semantic features")
    if not vec.semantic_absent and not model.semantics_used:
        raise FeatureLayoutMismatch("model was trained without semantic features")
    if model.norm_stats is None:
        raise MLPError("model carries no normalization statistics (untrained?)")
    row = vec.active()
    if row.shape[0] != model.input_dim:
        raise FeatureLayoutMismatch(
            f"feature width {row.shape[0]} != model input {model.input_dim}"
        )
    raw = float(model.predict(apply_norm(model.norm_stats, row)))
    k = min(max(raw, K_CLAMP_LOW), K_CLAMP_HIGH)
    if detail:
        return Prediction(k=k, raw=raw, clamped=(k != raw))
    return k


# ---------------------------------------------------------------------------
# Serialization

def save_model(model: MLPModel, path: str | Path) -> None:
    """Self-describing npz container; round-trips predictions bit-exactly."""
    meta = {
        "layout_version": MODEL_LAYOUT_VERSION,
        "input_dim": model.input_dim,
        "sizes": list(model.sizes),
        "bn_layers": list(model.bn_layers),
        "dropout_layers": list(model.dropout_layers),
        "dropout_rate": model.dropout_rate,
        "seed": model.seed,
        "activation": model.activation,
        "semantics_used": model.semantics_used,
        "has_norm_stats": model.norm_stats is not None,
        "metadata": model.metadata,
    }
    arrays: dict[str, np.ndarray] = {"meta": np.array(json.dumps(meta))}
    for i, blk in enumerate(model.blocks, start=1):
        arrays[f"l{i}_w"] = blk.dense.w
        arrays[f"l{i}_b"] = blk.dense.b
        if blk.bn is not None:
            arrays[f"l{i}_bn_gamma"] = blk.bn.gamma
            arrays[f"l{i}_bn_beta"] = blk.bn.beta
            arrays[f"l{i}_bn_mean"] = blk.bn.running_mean
            arrays[f"l{i}_bn_var"] = blk.bn.running_var
    if model.norm_stats is not None:
        arrays["norm_mean"] = model.norm_stats.mean
        arrays["norm_std"] = model.norm_stats.std
        arrays["norm_active"] = model.norm_stats.active
    np.savez(path, **arrays)


def load_model(path: str | Path) -> MLPModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["layout_version"] != MODEL_LAYOUT_VERSION:
            raise MLPError(f"unsupported model layout version {meta['layout_version']}")
        model = MLPModel(
            input_dim=meta["input_dim"],
            sizes=meta["sizes"],
            bn_layers=meta["bn_layers"],
            dropout_layers=meta["dropout_layers"],
            dropout_rate=meta["dropout_rate"],
            seed=meta["seed"],
            activation=meta["activation"],
            bn_momentum=meta["metadata"].get("bn_momentum", 0.9),
        )
        model.semantics_used = meta["semantics_used"]
        model.metadata = meta["metadata"]
        for i, blk in enumerate(model.blocks, start=1):
            blk.dense.w = data[f"l{i}_w"]
            blk.dense.b = data[f"l{i}_b"]
            if blk.bn is not None:
                blk.bn.gamma = data[f"l{i}_bn_gamma"]
                blk.bn.beta = data[f"l{i}_bn_beta"]
                blk.bn.running_mean = data[f"l{i}_bn_mean"]
                blk.bn.running_var = data[f"l{i}_bn_var"]
        if meta["has_norm_stats"]:
            model.norm_stats = NormStats(
                mean=data["norm_mean"],
                std=data["norm_std"],
                active=data["norm_active"],
            )
    return model
