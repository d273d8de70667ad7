"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Each operation takes an optional Tape. With a tape the operation records a
backward closure that accumulates gradients into its inputs; without one it
is a plain inference computation. Inference-mode dense layers accumulate
their products in a fixed order, so the result for one point never depends
on which other points share the batch.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import BN_EPSILON, BN_MOMENTUM
from src.errors import OnhError


class Tensor:
    """A float64 array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class Tape:
    """Ordered record of (output, backward closure) pairs."""

    def __init__(self):
        self.records: List[Tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.leaves: Dict[int, Tensor] = {}
        self._outputs: set = set()

    def record(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
        self.records.append((output, backward_fn))
        self._outputs.add(id(output))
        return output

    def watch(self, inputs: Sequence[Tensor]) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs:
                self.leaves.setdefault(id(t), t)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _track(tape: Optional[Tape], inputs: Sequence[Tensor], data: np.ndarray,
           backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.watch(inputs)
        tape.record(out, backward_fn)
    return out


def _shape_error(op: str, message: str) -> OnhError:
    return OnhError("tensor_core", "SHAPE_MISMATCH", f"{op}: {message}", field=op)


def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b with products accumulated sequentially over the shared axis."""
    if b.ndim == 2:
        out = a[..., 0:1] * b[0]
        for k in range(1, a.shape[-1]):
            out = out + a[..., k:k + 1] * b[k]
    else:
        out = a[..., 0:1] * b[:, None, 0, :]
        for k in range(1, a.shape[-1]):
            out = out + a[..., k:k + 1] * b[:, None, k, :]
    return out


def matmul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """
    Matrix product.

    Supports (n, k) @ (k, m), (B, n, k) @ (k, m) for shared weights and
    (B, n, k) @ (B, k, m) for per-sample transforms.

    Raises:
        OnhError: SHAPE_MISMATCH
    """
    A, W = a.data, b.data
    if A.ndim not in (2, 3) or W.ndim not in (2, 3) or A.shape[-1] != W.shape[-2]:
        raise _shape_error("matmul", f"cannot multiply {A.shape} by {W.shape}")
    if W.ndim == 3 and (A.ndim != 3 or A.shape[0] != W.shape[0]):
        raise _shape_error("matmul", f"batched transform {W.shape} needs input with batch {W.shape[0]}")

    data = _ordered_matmul(A, W) if tape is None else np.matmul(A, W)

    def backward_fn(g):
        a.accumulate(np.matmul(g, np.swapaxes(W, -1, -2)))
        if W.ndim == 2:
            b.accumulate(np.tensordot(A, g, axes=(list(range(A.ndim - 1)), list(range(g.ndim - 1)))))
        else:
            b.accumulate(np.matmul(np.swapaxes(A, -1, -2), g))

    return _track(tape, (a, b), data, backward_fn)


def bias_add(x: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if bias.data.ndim != 1 or x.data.shape[-1] != bias.data.shape[0]:
        raise _shape_error("bias_add", f"bias {bias.shape} does not match features of {x.shape}")
    axes = tuple(range(x.data.ndim - 1))

    def backward_fn(g):
        x.accumulate(g)
        bias.accumulate(g.sum(axis=axes))

    return _track(tape, (x, bias), x.data + bias.data, backward_fn)


def add(x: Tensor, y: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise sum; y may broadcast over the leading axes of x."""
    if y.data.ndim > x.data.ndim or x.data.shape[x.data.ndim - y.data.ndim:] != y.data.shape:
        raise _shape_error("add", f"cannot add {y.shape} to {x.shape}")
    lead = tuple(range(x.data.ndim - y.data.ndim))

    def backward_fn(g):
        x.accumulate(g)
        y.accumulate(g.sum(axis=lead) if lead else g)

    return _track(tape, (x, y), x.data + y.data, backward_fn)


def concat(tensors: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Join along the last axis."""
    lead = tensors[0].data.shape[:-1]
    if any(t.data.shape[:-1] != lead for t in tensors):
        raise _shape_error("concat", f"leading shapes differ: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.data.shape[-1] for t in tensors])

    def backward_fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            t.accumulate(g[..., lo:hi])

    return _track(tape, tensors, np.concatenate([t.data for t in tensors], axis=-1), backward_fn)


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    positive = x.data > 0

    def backward_fn(g):
        x.accumulate(g * positive)

    return _track(tape, (x,), np.where(positive, x.data, 0.0), backward_fn)


def scale(x: Tensor, factor: float, tape: Optional[Tape] = None) -> Tensor:
    def backward_fn(g):
        x.accumulate(g * factor)

    return _track(tape, (x,), x.data * factor, backward_fn)


def reshape(x: Tensor, shape: Tuple[int, ...], tape: Optional[Tape] = None) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", f"cannot reshape {x.shape} to {shape}")

    def backward_fn(g):
        x.accumulate(g.reshape(x.data.shape))

    return _track(tape, (x,), data, backward_fn)


def tensor_sum(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    def backward_fn(g):
        x.accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _track(tape, (x,), np.array(x.data.sum()), backward_fn)


@dataclass
class BatchNormState:
    """Running statistics of one batch normalization layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    @classmethod
    def create(cls, features: int) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, tape: Optional[Tape] = None) -> Tensor:
    """
    Batch normalization over every axis but the last.

    Training mode normalizes with batch statistics and updates the running
    statistics; inference mode uses the running statistics.
    """
    features = x.data.shape[-1]
    if gamma.data.shape != (features,) or beta.data.shape != (features,):
        raise _shape_error("batchnorm", f"affine parameters do not match {features} features")
    axes = tuple(range(x.data.ndim - 1))
    if training:
        count = int(np.prod([x.data.shape[a] for a in axes]))
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * unbiased
    else:
        count = None
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mean) * inv_std
    data = x_hat * gamma.data + beta.data

    def backward_fn(g):
        gamma.accumulate((g * x_hat).sum(axis=axes))
        beta.accumulate(g.sum(axis=axes))
        gx_hat = g * gamma.data
        if training:
            x.accumulate(inv_std / count * (
                count * gx_hat
                - gx_hat.sum(axis=axes)
                - x_hat * (gx_hat * x_hat).sum(axis=axes)))
        else:
            x.accumulate(gx_hat * inv_std)

    return _track(tape, (x, gamma, beta), data, backward_fn)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool,
            tape: Optional[Tape] = None) -> Tensor:
    """Inverted dropout; identity in inference mode or when p is 0."""
    if not training or p <= 0:
        return x if tape is None else _track(tape, (x,), x.data.copy(), x.accumulate)
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def backward_fn(g):
        x.accumulate(g * keep)

    return _track(tape, (x,), x.data * keep, backward_fn)


def max_over_set(x: Tensor, tape: Optional[Tape] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Max over the point axis of (N, D) or (B, N, D) features.

    Returns the pooled features and, per output dimension, the smallest point
    index attaining the maximum. The gradient flows to that point only.

    Raises:
        OnhError: EMPTY_SET
    """
    data = x.data
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    if data.ndim != 3:
        raise _shape_error("max_over_set", f"expected (N, D) or (B, N, D), got {x.shape}")
    if data.shape[1] == 0:
        raise OnhError("tensor_core", "EMPTY_SET", "max over an empty point set", field="max_over_set")
    argmax = np.argmax(data, axis=1)  # first occurrence
    batch = np.arange(data.shape[0])[:, None]
    dims = np.arange(data.shape[2])[None, :]
    pooled = data[batch, argmax, dims]

    def backward_fn(g):
        grad = np.zeros_like(data)
        grad[batch, argmax, dims] = g.reshape(pooled.shape)
        x.accumulate(grad[0] if squeeze else grad)

    if squeeze:
        return _track(tape, (x,), pooled[0], backward_fn), argmax[0]
    return _track(tape, (x,), pooled, backward_fn), argmax


def softmax_cross_entropy(logits: Tensor, labels, tape: Optional[Tape] = None) -> Tensor:
    """Mean cross-entropy of (B, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise _shape_error("softmax_cross_entropy", f"logits {z.shape} vs labels {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -log_probs[rows, labels].mean()

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        logits.accumulate(grad * (g / len(labels)))

    return _track(tape, (logits,), np.array(loss), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def orthogonality_penalty(transform: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Batch mean of ||I - F F^T||_F^2 for (B, k, k) transforms."""
    F = transform.data
    if F.ndim != 3 or F.shape[1] != F.shape[2]:
        raise _shape_error("orthogonality_penalty", f"expected (B, k, k), got {F.shape}")
    residual = np.eye(F.shape[1]) - np.matmul(F, np.swapaxes(F, 1, 2))
    value = (residual ** 2).sum() / F.shape[0]

    def backward_fn(g):
        transform.accumulate(-4.0 * np.matmul(residual, F) * (g / F.shape[0]))

    return _track(tape, (transform,), np.array(value), backward_fn)


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Reverse sweep from a scalar loss.

    Gradients accumulate into every tensor with requires_grad; the returned
    mapping holds the gradient of every leaf tensor, keyed by name (or by
    position for unnamed leaves).

    Raises:
        OnhError: NOT_SCALAR_LOSS
    """
    if loss.data.size != 1:
        raise OnhError("tensor_core", "NOT_SCALAR_LOSS",
                       f"loss must be scalar, got shape {loss.shape}", field="loss")
    loss.grad = np.ones_like(loss.data)
    for output, backward_fn in reversed(tape.records):
        if output.grad is not None:
            backward_fn(output.grad)
    for output, _ in tape.records:
        if output is not loss:
            output.grad = None
    return {
        (leaf.name if leaf.name else str(i)): leaf.grad
        for i, leaf in enumerate(tape.leaves.values())
        if leaf.grad is not None
    }
