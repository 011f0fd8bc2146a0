"""A small tape-based reverse-mode autodiff engine over numpy arrays.

Only the layers the three networks need are provided. Sequence tensors are
batch-first and time-major, ``[batch, time, channels]``, matching the
waveform layout on disk; dense tensors are ``[batch, features]``.
"""

from __future__ import annotations

import enum
from typing import Callable, Iterable

import numpy as np


class Mode(enum.Enum):
    TRAINING = "training"
    INFERENCE = "inference"


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every upstream leaf."""
        if not self._parents:
            raise GraphError("backward() called on a tensor with no recorded forward computation")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _result(data, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.data.dtype.type(0))
    return _result(out, (x,), lambda g: (g * (out > 0),))


def tensor_sum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))


def dropout(x: Tensor, rate: float, mode: Mode, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) in training."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode is Mode.INFERENCE or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(rate)
    mask = keep.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - rate))
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Layers


def same_padding(kernel: int, dilation: int) -> tuple[int, int]:
    """(left, right) zero padding that keeps length; the odd zero goes right."""
    total = (kernel - 1) * dilation
    return total // 2, total - total // 2


def conv1d(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """Dilated 'same' cross-correlation.

    x: ``[B, T, C_in]``; w: ``[C_out, C_in, K]``; b: ``[C_out]``.
    ``out[:, t, o] = b[o] + sum_{i,k} w[o, i, k] * xpad[:, t + k*dilation, i]``.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if x.data.ndim != 3:
        raise ValueError(f"conv1d expects [batch, time, channels], got {x.shape}")
    c_out, c_in, k = w.shape
    if x.shape[2] != c_in or b.shape != (c_out,):
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    n, t, _ = x.shape
    left, right = same_padding(k, dilation)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    taps = [np.ascontiguousarray(w.data[:, :, j].T) for j in range(k)]  # [C_in, C_out]
    dtype = np.result_type(x.data, w.data)
    out = np.empty((n, t, c_out), dtype=dtype)
    out[...] = b.data
    buf = np.empty((n, t, c_out), dtype=dtype)
    for j in range(k):
        s = j * dilation
        np.matmul(xp[:, s:s + t, :], taps[j], out=buf)
        out += buf
    del buf

    def backward(g):
        gx = gw = gb = None
        if _needs_grad(x):
            gxp = np.zeros_like(xp)
            gbuf = np.empty((n, t, c_in), dtype=gxp.dtype)
            for j in range(k):
                s = j * dilation
                np.matmul(g, taps[j].T, out=gbuf)
                gxp[:, s:s + t, :] += gbuf
            gx = gxp[:, left:left + t, :]
        if _needs_grad(w):
            gw = np.empty_like(w.data)
            for j in range(k):
                s = j * dilation
                # per-batch [C_in, T] @ [T, C_out], summed over the batch
                gw[:, :, j] = np.matmul(xp[:, s:s + t, :].transpose(0, 2, 1), g).sum(axis=0).T
        if _needs_grad(b):
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return _result(out, (x, w, b), backward)


def maxpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pool over time; trailing remainder dropped.

    Ties route the gradient to the first index of the window.
    """
    n, t, c = x.shape
    if t < size:
        raise ValueError(f"maxpool1d needs at least {size} time steps, got {t}")
    t_out = t // size
    windows = x.data[:, : t_out * size, :].reshape(n, t_out, size, c)
    idx = windows.argmax(axis=2)
    out = np.take_along_axis(windows, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(g):
        gw = np.zeros((n, t_out, size, c), dtype=g.dtype)
        np.put_along_axis(gw, idx[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, : t_out * size, :] = gw.reshape(n, t_out * size, c)
        return (gx,)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over time: ``[B, T, C] -> [B, C]``."""
    n, t, c = x.shape
    if t < 1:
        raise ValueError("global_avg_pool needs at least one time step")
    scale = x.data.dtype.type(1.0 / t)
    return _result(x.data.mean(axis=1), (x,),
                   lambda g: (np.broadcast_to(g[:, None, :] * scale, x.shape).copy(),))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with x ``[B, n]``, w ``[m, n]``, b ``[m]``."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data.T + b.data
    return _result(out, (x, w, b), lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


class BatchNormState:
    """Running statistics for one batch-norm layer (mutated in training mode)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: Mode,
              momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel (last axis) normalization.

    Training mode normalizes with the batch statistics (biased variance) and
    blends them into ``state``: ``running = momentum*running + (1-momentum)*batch``.
    """
    axes = tuple(range(x.data.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes]))
    dt = x.data.dtype.type
    if mode is Mode.TRAINING:
        if x.shape[0] < 2:
            raise ValueError("batch-norm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean[...] = momentum * state.mean + (1 - momentum) * mu
        state.var[...] = momentum * state.var + (1 - momentum) * var
    else:
        mu = state.mean.astype(x.data.dtype)
        var = state.var.astype(x.data.dtype)
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.data.dtype)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if mode is Mode.TRAINING:
            gx = (inv / dt(count)) * (dt(count) * gxhat - gxhat.sum(axis=axes)
                                      - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Batch-mean cross-entropy of a softmax head; returns (loss, probabilities)."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    n = len(targets)
    loss = -logp[np.arange(n), targets].mean()
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), targets] = 1

    def backward(g):
        return ((probs - onehot) * (g / n),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward), probs


# ---------------------------------------------------------------------------
# Parameters


class ParameterStore:
    """Named trainable tensors plus non-trainable buffers (batch-norm statistics)."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.bn:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_bn(self, name: str, channels: int, dtype=np.float32) -> BatchNormState:
        if name in self.bn or name in self.params:
            raise KeyError(f"duplicate batch-norm name {name!r}")
        st = BatchNormState(channels, dtype)
        self.bn[name] = st
        return st

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        """Every array that defines the model, buffers included, by name."""
        out = {k: t.data for k, t in self.params.items()}
        for k, st in self.bn.items():
            out[f"{k}.running_mean"] = st.mean
            out[f"{k}.running_var"] = st.var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.arrays()
        missing = set(mine) - set(arrays)
        extra = set(arrays) - set(mine)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.data.shape}")
            t.data[...] = arrays[k]  # in place: optimizers may hold references
        for k, st in self.bn.items():
            st.mean[...] = arrays[f"{k}.running_mean"]
            st.var[...] = arrays[f"{k}.running_var"]

    def astype(self, dtype) -> None:
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        for st in self.bn.values():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def he_uniform(rng: np.random.Generator, shape: Iterable[int], fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(dtype)
