"""Feed-forward dense model: forward/backward, BCE loss, AUC and optimizers.

Inputs are row-major ``(n, input_dim)`` matrices whose first
``group_count * embedding_dim`` columns are the aggregated embeddings and
whose remaining columns are the non-ID features.
"""
import hashlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigError,
    DivergenceError,
    InternalConsistencyError,
    PreconditionError,
    UndefinedMetricError,
)

BCE_EPS = 1e-7


@dataclass
class DenseModel:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    version: int = 0

    @classmethod
    def init(cls, dims: Sequence[int], seed: int = 0, dtype=np.float32) -> "DenseModel":
        """Glorot-uniform weights, zero biases.  ``dims = [input, hidden..., 1]``."""
        if len(dims) < 2 or dims[-1] != 1:
            raise ConfigError(f"dense dims must end in 1, got {list(dims)}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, dims: Sequence[int], dtype=np.float32) -> "DenseModel":
        return cls([np.zeros((o, i), dtype=dtype) for i, o in zip(dims[:-1], dims[1:])],
                   [np.zeros(o, dtype=dtype) for o in dims[1:]])

    @property
    def dims(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self, dtype=None) -> "DenseModel":
        dtype = dtype or self.dtype
        return DenseModel([w.astype(dtype, copy=True) for w in self.weights],
                          [b.astype(dtype, copy=True) for b in self.biases],
                          self.version)

    def load_params(self, params: Sequence[np.ndarray]):
        for dst, src in zip(self.params(), params):
            dst[...] = src
        self.version += 1

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def check_finite(self):
        if not all(np.isfinite(p).all() for p in self.params()):
            raise DivergenceError("dense model has non-finite parameters")


@dataclass
class ForwardCache:
    activations: List[np.ndarray]  # layer inputs, then the output probabilities
    model_id: int
    model_version: int


@dataclass
class GradientBundle:
    """Dense parameter gradients plus per-sample embedding-activation gradients.

    ``embedding`` has shape ``(n, group_count, embedding_dim)``; ``non_id``
    carries the gradient w.r.t. the non-ID columns (unused by training but
    handy for checks).
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    embedding: np.ndarray
    non_id: Optional[np.ndarray] = None

    def dense(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def dense_flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.dense()])

    def with_dense(self, flat_or_list) -> "GradientBundle":
        parts = unflatten_like(flat_or_list, self.dense()) if isinstance(flat_or_list, np.ndarray) else list(flat_or_list)
        return GradientBundle(parts[0::2], parts[1::2], self.embedding, self.non_id)


def unflatten_like(flat: np.ndarray, like: Sequence[np.ndarray]) -> List[np.ndarray]:
    out, pos = [], 0
    for ref in like:
        out.append(flat[pos:pos + ref.size].reshape(ref.shape).astype(ref.dtype, copy=False))
        pos += ref.size
    return out


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _inputs(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch
    return batch.inputs()


def forward(model: DenseModel, batch) -> Tuple[np.ndarray, ForwardCache]:
    """Predict click probabilities for ``batch`` (a Minibatch or input matrix)."""
    x = _inputs(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigError(f"batch width {x.shape[-1]} != model input_dim {model.input_dim}")
    h = x.astype(model.dtype, copy=False)
    acts = [h]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite loss is caught by the caller
            z = h @ w.T + b
        h = _sigmoid(z) if i == last else np.maximum(z, 0)
        acts.append(h)
    return h[:, 0], ForwardCache(acts, id(model), model.version)


def bce_loss(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise PreconditionError("bce_loss of an empty batch")
    if p.shape != y.shape:
        raise PreconditionError("predictions and labels differ in length")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def backward(model: DenseModel, batch, cache: ForwardCache, labels, embedding_width: Optional[int] = None,
             group_count: int = 1) -> GradientBundle:
    """Gradient of the mean BCE loss w.r.t. dense parameters and inputs."""
    if cache.model_id != id(model) or cache.model_version != model.version:
        raise InternalConsistencyError("forward cache does not belong to this model state")
    acts = cache.activations
    y = np.asarray(labels, dtype=model.dtype)
    n = y.shape[0]
    if acts[0].shape[0] != n:
        raise InternalConsistencyError("labels do not match cached batch")
    if embedding_width is None:
        embedding_width = getattr(batch, "embedding_width", acts[0].shape[1])
        group_count = getattr(batch, "group_count", 1)
    delta = ((acts[-1][:, 0] - y) / n).reshape(n, 1).astype(model.dtype)
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i]
        if i > 0:
            delta = delta * (acts[i] > 0)
    emb = delta[:, :embedding_width]
    dim = embedding_width // group_count if group_count else 0
    emb = emb.reshape(n, group_count, dim) if group_count else emb
    return GradientBundle(gw, gb, np.ascontiguousarray(emb), np.ascontiguousarray(delta[:, embedding_width:]))


def auc(predictions, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels) > 0.5
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(p, kind="mergesort")
    sorted_p = p[order]
    ranks = np.empty(p.size, dtype=np.float64)
    # average 1-based ranks over runs of tied scores
    boundaries = np.flatnonzero(np.diff(sorted_p)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [p.size]))
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    rank_sum = ranks[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sgd_step(model: DenseModel, grads: Sequence[np.ndarray], lr: float) -> DenseModel:
    """In-place ``w <- w - lr * g``; returns the same model."""
    if lr < 0:
        raise PreconditionError("learning rate must be non-negative")
    params = model.params()
    if len(grads) != len(params):
        raise PreconditionError("gradient list does not match model parameters")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise PreconditionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise DivergenceError("non-finite dense gradient")
    for p, g in zip(params, grads):
        p -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
    model.version += 1
    return model


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, model: DenseModel, grads: Sequence[np.ndarray]) -> DenseModel:
        params = model.params()
        for g in grads:
            if not np.isfinite(g).all():
                raise DivergenceError("non-finite dense gradient")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        model.version += 1
        return model

    def state(self):
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state):
        self.t = state["t"]
        self.m = [a.copy() for a in state["m"]]
        self.v = [a.copy() for a in state["v"]]


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, model, grads):
        return sgd_step(model, grads, self.lr)

    def state(self):
        return {}

    def load_state(self, state):
        pass


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown dense optimizer {kind!r}")


def _loss_of(model, x, labels):
    p, _ = forward(model, x)
    return bce_loss(p, labels)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from
    turning finite-difference noise into large ratios."""
    a, n = float(analytic), float(numeric)
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(model: DenseModel, batch, labels, eps: float = 1e-5, include_inputs: bool = True,
               embedding_width: Optional[int] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 copy; see :func:`relative_error`.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise PreconditionError("eps must lie in [1e-6, 1e-3]")
    m = model.copy(np.float64)
    x = np.array(_inputs(batch), dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    width = x.shape[1] if embedding_width is None else embedding_width
    _, cache = forward(m, x)
    g = backward(m, x, cache, y, embedding_width=width, group_count=1)
    worst = 0.0
    for p, gp in zip(m.params(), g.dense()):
        flat, gflat = p.reshape(-1), gp.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = _loss_of(m, x, y)
            flat[j] = old - eps
            down = _loss_of(m, x, y)
            flat[j] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, relative_error(gflat[j], num))
    if include_inputs:
        dx = np.concatenate([g.embedding.reshape(x.shape[0], -1), g.non_id], axis=1)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                old = x[i, j]
                x[i, j] = old + eps
                up = _loss_of(m, x, y)
                x[i, j] = old - eps
                down = _loss_of(m, x, y)
                x[i, j] = old
                num = (up - down) / (2 * eps)
                worst = max(worst, relative_error(dx[i, j], num))
    return worst
