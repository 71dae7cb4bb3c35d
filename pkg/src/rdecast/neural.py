"""Minimal feedforward-network stack: forward, backprop, Adam, persistence.

All four networks in this package share one architecture family: softplus
hidden layers, a linear output layer, and per-input z-score normalization
folded into the forward pass.  Training is plain mini-batch Adam on (optionally
sample-weighted) mean squared error, deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "MlpFormatError",
    "TrainingError",
    "NormStats",
    "Mlp",
    "TrainConfig",
    "TrainResult",
    "softplus",
    "softplus_prime",
    "new_mlp",
    "mlp_forward",
    "mlp_gradients",
    "mlp_train",
    "mlp_save",
    "mlp_load",
    "mlp_save_file",
    "mlp_load_file",
]


class MlpFormatError(ValueError):
    """Malformed network document."""


class TrainingError(RuntimeError):
    """Training failed (divergence or bad inputs)."""


def softplus(x):
    """Overflow-safe ``ln(1 + exp(x))``; reduces to ``x`` for large ``x``.

    The argument of the exponential is capped at 30, where the linear tail
    already agrees with the exact value to well below double rounding.
    Float32 arrays are evaluated in float32 (bulk evaluation path).
    """
    arr = np.asarray(x)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64)
    return np.log1p(np.exp(np.minimum(arr, 30.0))) + np.maximum(arr - 30.0, 0.0)


def softplus_prime(x):
    """Derivative of softplus: the logistic function."""
    out = np.empty_like(np.asarray(x, dtype=float))
    np.negative(np.abs(x), out=out)
    np.exp(out, out=out)
    out /= 1.0 + out
    return np.where(np.asarray(x) >= 0, 1.0 - out, out)


@dataclass(frozen=True)
class NormStats:
    """Per-input z-score statistics; ``scale`` is strictly positive."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        if mean.ndim != 1 or mean.shape != scale.shape:
            raise MlpFormatError("norm mean and scale must be 1-d and equal length")
        if np.any(scale <= 0) or not np.all(np.isfinite(mean)) or not np.all(np.isfinite(scale)):
            raise MlpFormatError("norm scale must be finite and positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @staticmethod
    def identity(width: int) -> "NormStats":
        return NormStats(np.zeros(width), np.ones(width))

    @staticmethod
    def from_data(x: np.ndarray) -> "NormStats":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # Constant columns carry no information; leave them unscaled.
        scale = np.where(std < 1e-12, 1.0, std)
        return NormStats(mean, scale)


@dataclass
class Mlp:
    """Feedforward network: softplus hidden layers, linear output.

    ``weights[l]`` has shape (fan_in, fan_out); forward computes
    ``h = softplus(h @ W + b)`` per hidden layer on z-scored inputs.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm: NormStats

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise MlpFormatError("layer_sizes needs at least input and output width")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise MlpFormatError("one weight matrix and bias vector per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise MlpFormatError(
                    f"layer {i} shapes {w.shape}/{b.shape} inconsistent with sizes {sizes}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise MlpFormatError(f"layer {i} parameters must be finite")
        if self.norm.mean.shape[0] != sizes[0]:
            raise MlpFormatError("norm width must equal the network input width")
        self.layer_sizes = sizes

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_width(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.norm,
        )

    def lipschitz_bound(self) -> float:
        """Upper bound on the input-output Lipschitz constant.

        Product of the layer spectral norms; softplus has derivative < 1.
        Normalization contributes the inverse scales.
        """
        bound = float(np.max(1.0 / self.norm.scale))
        for w in self.weights:
            bound *= float(np.linalg.norm(w, 2))
        return bound

    def __call__(self, x):
        return mlp_forward(self, x)


def new_mlp(layer_sizes, rng: np.random.Generator | int) -> Mlp:
    """Glorot-uniform initialized network with identity normalization."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    sizes = tuple(int(s) for s in layer_sizes)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, NormStats.identity(sizes[0]))


def _forward_cached(net: Mlp, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    h = (x - net.norm.mean) / net.norm.scale
    pre = []
    acts = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else softplus(z)
        acts.append(h)
    return h, pre, acts


def mlp_forward(net: Mlp, x):
    """Evaluate the network; accepts one input vector or a batch.

    Inputs are z-scored internally.  The composition of affine maps and
    softplus layers is continuously differentiable everywhere.
    """
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    if single:
        x_arr = x_arr[None, :]
    if x_arr.ndim != 2 or x_arr.shape[1] != net.input_width:
        raise ValueError(
            f"input width {x_arr.shape[-1]} does not match network input width {net.input_width}"
        )
    out, _, _ = _forward_cached(net, x_arr)
    return out[0] if single else out


def mlp_gradients(net: Mlp, inputs, targets, sample_weights=None):
    """Exact reverse-mode gradients of (weighted) mean squared error.

    Returns ``(grad_weights, grad_biases, loss)``.  The loss is the mean of
    ``w_i * (pred_ij - y_ij)**2`` over all batch elements and outputs; with
    unit weights this is plain MSE.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise TrainingError("empty batch")
    if x.shape[0] != y.shape[0] or y.shape[1] != net.output_width:
        raise ValueError("batch input/target shapes are inconsistent")

    pred, pre, acts = _forward_cached(net, x)
    resid = pred - y
    if sample_weights is not None:
        w = np.asarray(sample_weights, dtype=float)[:, None]
        loss = float(np.mean(w * resid * resid))
        delta = 2.0 * w * resid / resid.size
    else:
        loss = float(np.mean(resid * resid))
        delta = 2.0 * resid / resid.size
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss")

    grad_w = [np.empty_like(wm) for wm in net.weights]
    grad_b = [np.empty_like(bv) for bv in net.biases]
    for layer in range(len(net.weights) - 1, -1, -1):
        grad_w[layer] = acts[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ net.weights[layer].T) * softplus_prime(pre[layer - 1])
    return grad_w, grad_b, loss


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and split settings; defaults are the package-wide choices."""

    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 500
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    validation_fraction: float = 0.1
    patience: int = 25

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass
class TrainResult:
    net: Mlp
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int


def mlp_train(
    net: Mlp,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    sample_weights: np.ndarray | None = None,
) -> TrainResult:
    """Train a copy of ``net`` with Adam; deterministic for a fixed seed.

    Normalization statistics are computed from the training split only and
    installed on the returned network.  Early stopping watches validation MSE
    with the configured patience and restores the best parameters.  With
    ``epochs = 0`` the input network is returned unchanged.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise TrainingError("empty dataset")
    if cfg.epochs == 0:
        return TrainResult(net.copy(), [], [], -1)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(x.shape[0])
    n_val = int(round(cfg.validation_fraction * x.shape[0]))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise TrainingError("training split is empty")
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]
    w_train = w_val = None
    if sample_weights is not None:
        w_all = np.asarray(sample_weights, dtype=float)
        w_train, w_val = w_all[train_idx], w_all[val_idx]

    model = net.copy()
    model.norm = NormStats.from_data(x_train)

    m_w = [np.zeros_like(w) for w in model.weights]
    v_w = [np.zeros_like(w) for w in model.weights]
    m_b = [np.zeros_like(b) for b in model.biases]
    v_b = [np.zeros_like(b) for b in model.biases]
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps

    def val_loss() -> float:
        if x_val.shape[0] == 0:
            return np.nan
        pred = mlp_forward(model, x_val)
        resid = pred - y_val
        if w_val is not None:
            return float(np.mean(w_val[:, None] * resid * resid))
        return float(np.mean(resid * resid))

    train_hist: list[float] = []
    val_hist: list[float] = []
    best = (np.inf, -1, None, None)
    adam_t = 0
    n_train = x_train.shape[0]

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_train)
        batch_losses = []
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            bw = w_train[idx] if w_train is not None else None
            grad_w, grad_b, loss = mlp_gradients(model, x_train[idx], y_train[idx], bw)
            if not np.isfinite(loss):
                raise TrainingError(f"divergence at epoch {epoch}")
            batch_losses.append(loss)
            adam_t += 1
            corr1 = 1.0 - b1**adam_t
            corr2 = 1.0 - b2**adam_t
            for p, g, m, v in zip(model.weights, grad_w, m_w, v_w):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + eps)
            for p, g, m, v in zip(model.biases, grad_b, m_b, v_b):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + eps)

        train_hist.append(float(np.mean(batch_losses)))
        vl = val_loss()
        val_hist.append(vl)
        if np.isfinite(vl) and vl < best[0]:
            best = (vl, epoch, [w.copy() for w in model.weights], [b.copy() for b in model.biases])
        if np.isfinite(vl) and best[1] >= 0 and epoch - best[1] >= cfg.patience:
            break

    if best[2] is not None:
        model.weights = best[2]
        model.biases = best[3]
        best_epoch = best[1]
    else:
        best_epoch = len(train_hist) - 1
    return TrainResult(model, train_hist, val_hist, best_epoch)


# ---------------------------------------------------------------------------
# Persistence: JSON documents with full binary64 round trip
# ---------------------------------------------------------------------------


def mlp_save(net: Mlp) -> dict:
    """Serializable document; floats survive JSON via repr round-trip."""
    return {
        "layer_sizes": list(net.layer_sizes),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "norm": {"mean": net.norm.mean.tolist(), "scale": net.norm.scale.tolist()},
    }


def mlp_load(doc: dict) -> Mlp:
    for key in ("layer_sizes", "weights", "biases", "norm"):
        if key not in doc:
            raise MlpFormatError(f"network document missing field '{key}'")
    norm_doc = doc["norm"]
    for key in ("mean", "scale"):
        if key not in norm_doc:
            raise MlpFormatError(f"network document missing field 'norm.{key}'")
    try:
        sizes = tuple(int(s) for s in doc["layer_sizes"])
        weights = [np.array(w, dtype=float) for w in doc["weights"]]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        norm = NormStats(np.array(norm_doc["mean"], dtype=float), np.array(norm_doc["scale"], dtype=float))
    except (TypeError, ValueError) as exc:
        raise MlpFormatError(f"network document field malformed: {exc}") from exc
    return Mlp(sizes, weights, biases, norm)


def mlp_save_file(net: Mlp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mlp_save(net)) + "\n")


def mlp_load_file(path: str | Path) -> Mlp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MlpFormatError(f"network file {path} is not valid JSON: {exc}") from exc
    return mlp_load(doc)
