"""Cluster classifier for partial scans.

A distance grid is max-pooled to 8^3 and fed to a small ReLU MLP with a
softmax output over the collection's structural clusters.  Training is plain
minibatch SGD with momentum on cross-entropy, with inverted dropout on the
hidden layers.  Everything is seeded and runs in float64 numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (BadConfig, BadK, BadLabels, DimensionMismatch, EmptyDataset,
                     InputError, ParseError)
from .geometry import (DEFAULT_GRID_RESOLUTION, DEFAULT_TRUNCATION, DistanceGrid,
                       rasterize_distance_grid)

MODEL_FORMAT = "boxtemplates-mlp/1"
POOLED = 8
HIDDEN = (256, 128)


def featurize(grid: DistanceGrid, pooled: int = POOLED) -> np.ndarray:
    """Max-pool the grid to ``pooled``^3 cells, flatten, divide by the truncation."""
    v = np.asarray(grid.values, dtype=float)
    if all(r % pooled == 0 for r in v.shape):
        wx, wy, wz = (r // pooled for r in v.shape)
        out = v.reshape(pooled, wx, pooled, wy, pooled, wz).max(axis=(1, 3, 5))
    else:
        splits = [np.array_split(np.arange(r), pooled) for r in v.shape]
        out = np.empty((pooled,) * 3)
        for i, a in enumerate(splits[0]):
            for j, b in enumerate(splits[1]):
                for k, c in enumerate(splits[2]):
                    out[i, j, k] = v[np.ix_(a, b, c)].max()
    return out.ravel() / grid.truncation


def cloud_features(cloud, resolution: int = DEFAULT_GRID_RESOLUTION,
                   truncation: float = DEFAULT_TRUNCATION) -> np.ndarray:
    return featurize(rasterize_distance_grid(cloud, resolution, truncation))


@dataclass
class MlpModel:
    layer_sizes: tuple
    weights: list  # (fan_in, fan_out) arrays
    biases: list
    dropout_rate: float = 0.2
    version: str = MODEL_FORMAT

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        self.layer_sizes = sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionMismatch("one weight matrix and bias per layer transition")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise DimensionMismatch(f"layer {l} shapes {W.shape}, {b.shape} do not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InputError(f"layer {l} has non-finite parameters")

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> MlpModel:
        return MlpModel(self.layer_sizes, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.dropout_rate, self.version)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "layer_sizes": list(self.layer_sizes),
            "dropout_rate": self.dropout_rate,
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpModel:
        if not isinstance(d, dict):
            raise ParseError("classifier model must be a JSON object")
        if d.get("format") != MODEL_FORMAT:
            raise ParseError(f"not a classifier model (format {d.get('format')!r})", field="format")
        try:
            sizes = [int(s) for s in d["layer_sizes"]]
            Ws = [np.array(w, dtype=float).reshape(sizes[l], sizes[l + 1])
                  for l, w in enumerate(d["weights"])]
            bs = [np.array(b, dtype=float) for b in d["biases"]]
            return cls(tuple(sizes), Ws, bs, float(d.get("dropout_rate", 0.2)))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"malformed classifier model: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict()) + "\n"

    @classmethod
    def loads(cls, text: str) -> MlpModel:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed classifier model: {exc.msg}", line=exc.lineno) from None


def init_model(layer_sizes: Sequence[int], seed=0, dropout_rate: float = 0.2) -> MlpModel:
    """Weights and biases uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for fi, fo in zip(layer_sizes[:-1], layer_sizes[1:]):
        r = 1.0 / np.sqrt(fi)
        Ws.append(rng.uniform(-r, r, size=(fi, fo)))
        bs.append(rng.uniform(-r, r, size=fo))
    return MlpModel(tuple(layer_sizes), Ws, bs, dropout_rate)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_masks(model: MlpModel, batch: int, rng) -> list:
    """Inverted-dropout masks (kept units scaled by 1/(1-p)) for each hidden layer."""
    p = model.dropout_rate
    if p <= 0:
        return [None] * (len(model.weights) - 1)
    return [(rng.random((batch, h)) >= p) / (1.0 - p) for h in model.layer_sizes[1:-1]]


def forward(model: MlpModel, X, masks: Optional[list] = None):
    """Logits and the activations needed for backprop.  ``masks=None`` is inference."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_inputs:
        raise DimensionMismatch(f"model expects {model.n_inputs} features, got {X.shape[1]}")
    acts = [X]
    h = X
    n_hidden = len(model.weights) - 1
    for l in range(n_hidden):
        h = np.maximum(h @ model.weights[l] + model.biases[l], 0.0)
        if masks is not None and masks[l] is not None:
            h = h * masks[l]
        acts.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    return logits, acts


def loss_and_grads(model: MlpModel, X, y, masks: Optional[list] = None):
    """Mean cross-entropy over the batch and its gradients (dW list, db list)."""
    logits, acts = forward(model, X, masks)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    dWs, dbs = [None] * len(model.weights), [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        dWs[l] = acts[l].T @ g
        dbs[l] = g.sum(axis=0)
        if l > 0:
            g = g @ model.weights[l].T
            # acts[l] is relu output times mask; zero where the unit was off
            if masks is not None and masks[l - 1] is not None:
                g = g * masks[l - 1]
            g = g * (acts[l] > 0)
    return loss, dWs, dbs


def gradient_check(model: MlpModel, X, y, masks=None, eps: float = 1e-6) -> float:
    """Relative error ||analytic - numeric|| / (||analytic|| + ||numeric||)."""
    _, dWs, dbs = loss_and_grads(model, X, y, masks)
    ana, num = [], []
    for params, grads in ((model.weights, dWs), (model.biases, dbs)):
        for P, G in zip(params, grads):
            flat = P.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                fp = loss_and_grads(model, X, y, masks)[0]
                flat[i] = old - eps
                fm = loss_and_grads(model, X, y, masks)[0]
                flat[i] = old
                num.append((fp - fm) / (2 * eps))
            ana.extend(G.reshape(-1).tolist())
    ana, num = np.array(ana), np.array(num)
    denom = np.linalg.norm(ana) + np.linalg.norm(num)
    return float(np.linalg.norm(ana - num) / denom) if denom > 0 else 0.0


def predict(model: MlpModel, x) -> np.ndarray:
    """Class probabilities for a grid, a feature vector, or a (batch, d) array."""
    if isinstance(x, DistanceGrid):
        x = featurize(x)
    logits, _ = forward(model, x)
    p = softmax(logits)
    return p[0] if np.ndim(x) == 1 else p


def top_k(probabilities, k: int) -> list:
    """The ``k`` most likely ids, ties broken toward the lower id."""
    p = np.asarray(probabilities, dtype=float).reshape(-1)
    if not 1 <= k <= p.size:
        raise BadK(f"k must be in [1, {p.size}], got {k}")
    return [int(i) for i in sorted(range(p.size), key=lambda i: (-p[i], i))[:k]]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    batch_size: int = 16
    epochs: int = 40
    seed: int = 0
    augmentation: bool = False
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden: tuple = HIDDEN

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise BadConfig(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise BadConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise BadConfig(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.momentum < 1:
            raise BadConfig(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    first_batch_loss: float = float("nan")


def _as_matrix(dataset):
    X, y = [], []
    for x, label in dataset:
        X.append(featurize(x) if isinstance(x, DistanceGrid) else np.ravel(np.asarray(x, float)))
        y.append(label)
    dims = {v.size for v in X}
    if len(dims) != 1:
        raise DimensionMismatch(f"dataset features have differing sizes {sorted(dims)}")
    return np.array(X), np.array(y)


def train(dataset, config: TrainConfig = TrainConfig(), n_classes: Optional[int] = None,
          augment: Optional[Callable] = None, model: Optional[MlpModel] = None):
    """Fit an MLP to (grid or feature vector, cluster id) pairs.

    With ``config.augmentation`` on and an ``augment(epoch, rng)`` callable,
    every epoch trains on the freshly generated dataset it returns instead of
    ``dataset``.  Returns (model, TrainHistory).
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("training needs at least one example")
    X0, y0 = _as_matrix(dataset)
    if not np.all(np.equal(np.mod(y0, 1), 0)):
        raise BadLabels("labels must be integers")
    y0 = y0.astype(np.int64)
    if n_classes is None:
        n_classes = int(y0.max()) + 1
    if y0.min() < 0 or y0.max() >= n_classes:
        raise BadLabels(f"labels must lie in [0, {n_classes}), got range [{y0.min()}, {y0.max()}]")
    sizes = (X0.shape[1],) + tuple(config.hidden) + (int(n_classes),)
    if model is None:
        model = init_model(sizes, seed=[config.seed, 0])
    elif model.layer_sizes != sizes:
        raise DimensionMismatch(f"model layers {model.layer_sizes} differ from {sizes}")
    else:
        model = model.copy()
    shuffle_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    aug_rng = np.random.default_rng([config.seed, 3])
    vel_W = [np.zeros_like(W) for W in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    hist = TrainHistory()
    lr, mom, wd = config.learning_rate, config.momentum, config.weight_decay
    for epoch in range(config.epochs):
        X, y = X0, y0
        if config.augmentation and augment is not None:
            X, y = _as_matrix(augment(epoch, aug_rng))
            y = y.astype(np.int64)
            if y.min() < 0 or y.max() >= n_classes:
                raise BadLabels("augmented labels out of range")
        perm = shuffle_rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), config.batch_size):
            idx = perm[start:start + config.batch_size]
            masks = dropout_masks(model, len(idx), drop_rng)
            loss, dWs, dbs = loss_and_grads(model, X[idx], y[idx], masks)
            if np.isnan(hist.first_batch_loss):
                hist.first_batch_loss = loss
            total += loss * len(idx)
            if lr == 0:
                continue
            for l in range(len(model.weights)):
                vel_W[l] = mom * vel_W[l] - lr * (dWs[l] + wd * model.weights[l])
                vel_b[l] = mom * vel_b[l] - lr * dbs[l]
                model.weights[l] += vel_W[l]
                model.biases[l] += vel_b[l]
        hist.loss.append(total / len(y))
        hist.accuracy.append(float(np.mean(np.argmax(forward(model, X)[0], axis=1) == y)))
    return model, hist


def scan_augmenter(sources: Sequence, scan_config=None, resolution: int = DEFAULT_GRID_RESOLUTION,
                   truncation: float = DEFAULT_TRUNCATION, views_per_epoch: int = 1,
                   pool_size: int = 8) -> Callable:
    """Augmentation callback re-scanning (cloud, label) sources from fresh viewpoints.

    Each source keeps a rolling pool of ``pool_size`` scans.  The first call
    fills the pools; every later call replaces the ``views_per_epoch`` oldest
    scans of each source with new ones, drawn with a random viewpoint and
    scan seed.  The whole pool is returned, so an epoch sees many views per
    shape while only a few are re-simulated.
    """
    from collections import deque
    from dataclasses import replace

    from .scansim import ScanConfig, simulate_partial_scan
    if pool_size < 1 or views_per_epoch < 0:
        raise BadConfig("pool_size must be >= 1 and views_per_epoch >= 0")
    base = scan_config or ScanConfig()
    sources = list(sources)
    pools = [deque(maxlen=pool_size) for _ in sources]

    def view(cloud, rng):
        cfg = replace(base, viewpoint=None, seed=int(rng.integers(2 ** 63)))
        return cloud_features(simulate_partial_scan(cloud, cfg), resolution, truncation)

    def augment(epoch, rng):
        fresh = min(views_per_epoch, pool_size)
        out = []
        for (cloud, label), pool in zip(sources, pools):
            for _ in range(pool_size - len(pool) if len(pool) < pool_size else fresh):
                pool.append(view(cloud, rng))
            out.extend((x, label) for x in pool)
        return out

    return augment
