"""Dense float tensors with tape-based reverse-mode automatic differentiation.

This module covers exactly the primitives the comparison ranker needs:
batched matmul against rank-2 weights, last-axis concat/gather, pairwise
tile/transpose, batch normalization with running statistics, elementwise
activations, axis reductions, and clamped cross-entropy. Each operation
records a backward closure on the output tensor; ``Tensor.backward`` walks
the implicit tape in reverse topological order and accumulates gradients
into every leaf that requires them. The tape is consumed by ``backward``
and cannot be replayed.

Forward data lives in numpy arrays. The default element type is float32;
``set_default_dtype(np.float64)`` switches new tensors to float64, which
gradient-check suites use to make finite differences crisp.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32

LOG_CLAMP = 1e-7  # lower clamp inside every cross-entropy log


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from raw data (f32 or f64)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use np.float32 or np.float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense array plus optional gradient and tape linkage.

    Tensors are immutable after creation by convention; only ``grad`` is
    accumulated in place during ``backward``. Interior nodes hold parent
    references and a backward closure until the tape is consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A view of the same data with no tape linkage."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all requiring leaves.

        The traversal visits each recorded node exactly once and then frees
        the tape; calling ``backward`` a second time on the same output
        raises ``RuntimeError``.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise RuntimeError("backward() called twice on a consumed graph; rebuild the forward pass")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Consume the tape: break parent links so intermediates can be freed.
        for node in topo:
            if node is not self:
                node._parents = ()
                node._backward = None
        self._parents = ()
        self._backward = None
        self._consumed = True

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            np.add(self.grad, g, out=self.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap a forward result, recording the tape edge when gradients flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic (broadcast on leading dims, plus scalars) ----------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of ``a`` with a rank-2 ``b``: [..,p,q] x [q,r] -> [..,p,r]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2:
        raise ShapeError(f"matmul right operand must be rank 2, got shape {b.data.shape}")
    if a.data.ndim < 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, b.data.T))
        if b.requires_grad:
            q = a.data.shape[-1]
            r = b.data.shape[1]
            a2 = a.data.reshape(-1, q)
            g2 = g.reshape(-1, r)
            b._accumulate(a2.T @ g2)

    return _make(data, (a, b), backward)


def transpose2(x: Tensor) -> Tensor:
    """Plain rank-2 transpose, [p,q] -> [q,p]."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2 requires rank 2, got shape {x.data.shape}")
    data = np.ascontiguousarray(x.data.T)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.T)

    return _make(data, (x,), backward)


def bank_mix(gate: Tensor, banks: Tensor) -> Tensor:
    """Convex-combination of parameter banks: out = sum_s gate[s] * banks[s].

    ``gate`` is a rank-1 weight vector of length S and ``banks`` stacks S
    same-shaped parameter arrays on axis 0.
    """
    gate, banks = _as_tensor(gate), _as_tensor(banks)
    if gate.data.ndim != 1 or banks.data.shape[0] != gate.data.shape[0]:
        raise ShapeError(f"bank_mix shapes disagree: gate {gate.data.shape}, banks {banks.data.shape}")
    s = gate.data.shape[0]
    data = np.tensordot(gate.data, banks.data, axes=(0, 0))

    def backward(g):
        if gate.requires_grad:
            gate._accumulate(banks.data.reshape(s, -1) @ g.ravel())
        if banks.requires_grad:
            banks._accumulate(np.multiply.outer(gate.data, g))

    return _make(data, (gate, banks), backward)


# -- shape manipulation ---------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if np.prod(shape, dtype=np.int64) != x.data.size:
        raise ShapeError(f"reshape element count mismatch: {x.data.shape} -> {shape}")
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def concat_last(xs: list) -> Tensor:
    """Concatenate along the last axis; all other dims must agree."""
    xs = [_as_tensor(x) for x in xs]
    lead = xs[0].data.shape[:-1]
    for x in xs[1:]:
        if x.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last leading dims disagree: {xs[0].data.shape} vs {x.data.shape}"
            )
    data = np.concatenate([x.data for x in xs], axis=-1)
    widths = [x.data.shape[-1] for x in xs]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                x._accumulate(g[..., lo:hi])

    return _make(data, tuple(xs), backward)


def gather_last(x: Tensor, indices) -> Tensor:
    """Select columns of the last axis in the given order."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_last expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[-1]):
        raise ShapeError(f"gather_last index out of range for width {x.data.shape[-1]}")
    data = np.ascontiguousarray(x.data[..., idx])

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (Ellipsis, idx), g)
            x._accumulate(gx)

    return _make(data, (x,), backward)


def tile_rows(x: Tensor) -> Tensor:
    """Lift [N,F] to [N,N,F] with out[i][j] = x[i] for every j."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"tile_rows requires rank 2, got shape {x.data.shape}")
    n = x.data.shape[0]
    data = np.ascontiguousarray(np.broadcast_to(x.data[:, None, :], (n, n, x.data.shape[1])))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.sum(axis=1))

    return _make(data, (x,), backward)


def pair_transpose(x: Tensor) -> Tensor:
    """Swap the two pair axes: out[i][j] = x[j][i]. Involution."""
    x = _as_tensor(x)
    if x.data.ndim < 2 or x.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"pair_transpose requires equal first two dims, got shape {x.data.shape}")
    data = np.ascontiguousarray(np.swapaxes(x.data, 0, 1))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.swapaxes(g, 0, 1))

    return _make(data, (x,), backward)


# -- activations and reductions --------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make(data, (x,), backward)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = _sigmoid_np(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _make(data, (x,), backward)


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - dot))

    return _make(data, (x,), backward)


def sum_pool(x: Tensor, axis: int) -> Tensor:
    """Sum over one axis, removing it."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"sum_pool axis {axis} out of range for shape {x.data.shape}")
    axis = axis % x.data.ndim
    data = x.data.sum(axis=axis)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a scalar tensor."""
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), backward)


def cross_entropy(p: Tensor, y) -> Tensor:
    """Scalar -sum(y * log(p)) with p clamped below at 1e-7.

    ``y`` is treated as a constant target (one-hot, binary, or soft); the
    gradient flows to ``p`` only.
    """
    p = _as_tensor(p)
    y_data = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=p.data.dtype)
    if y_data.shape != p.data.shape:
        raise ShapeError(f"cross_entropy shape mismatch: p {p.data.shape}, y {y_data.shape}")
    clamped = np.maximum(p.data, LOG_CLAMP)
    data = np.asarray(-(y_data * np.log(clamped)).sum(), dtype=p.data.dtype)

    def backward(g):
        if p.requires_grad:
            gp = np.where(p.data > LOG_CLAMP, -y_data / clamped, 0.0)
            p._accumulate(g * gp.astype(p.data.dtype, copy=False))

    return _make(data, (p,), backward)


# -- batch normalization -----------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics for one normalization layer (last-axis columns)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    updates: int = 0
    _warned: bool = field(default=False, repr=False)

    @classmethod
    def create(cls, width: int, dtype=None, momentum: float = 0.1, eps: float = 1e-5):
        dtype = dtype or _DEFAULT_DTYPE
        return cls(mean=np.zeros(width, dtype=dtype), var=np.ones(width, dtype=dtype),
                   momentum=momentum, eps=eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Normalize the last axis over all leading dims flattened.

    Train mode normalizes by batch statistics and folds them into the
    running estimates with the state's momentum; eval mode normalizes by
    the running estimates. Learnable scale and shift are applied last.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm scale/shift must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    flat = x.data.reshape(-1, c)
    m = flat.shape[0]
    if mode == "train":
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        state.mean = ((1.0 - state.momentum) * state.mean + state.momentum * mu).astype(state.mean.dtype)
        state.var = ((1.0 - state.momentum) * state.var + state.momentum * var).astype(state.var.dtype)
        state.updates += 1
    else:
        if state.updates == 0 and not state._warned:
            logger.warning("batch_norm eval before any train step; using initialized stats")
            state._warned = True
        mu = state.mean
        var = state.var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mu) * inv_std
    data = gamma.data * x_hat + beta.data

    def backward(g):
        g_flat = g.reshape(-1, c)
        xh_flat = x_hat.reshape(-1, c)
        if gamma.requires_grad:
            gamma._accumulate((g_flat * xh_flat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g_flat.sum(axis=0))
        if x.requires_grad:
            d_xhat = g_flat * gamma.data
            if mode == "train":
                dx = inv_std / m * (
                    m * d_xhat
                    - d_xhat.sum(axis=0)
                    - xh_flat * (d_xhat * xh_flat).sum(axis=0)
                )
            else:
                dx = d_xhat * inv_std
            x._accumulate(dx.reshape(x.data.shape))

    return _make(data, (x, gamma, beta), backward)


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_elements: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f, xs, eps: float = 1e-3, tol: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``xs`` lists the tensors whose gradients are checked; ``f`` must rebuild
    its forward pass on every call (reading the current ``.data`` of each
    tensor) and be deterministic, so normalization layers must run in eval
    mode. Elements where both gradients are below ``floor`` in magnitude
    count as exact.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.zero_grad()
    out = f()
    out.backward()
    analytic = [np.array(x.grad, dtype=np.float64) if x.grad is not None
                else np.zeros(x.data.shape, dtype=np.float64) for x in xs]

    max_err = 0.0
    n_total = 0
    for x, a in zip(xs, analytic):
        flat = x.data.reshape(-1)
        numeric = np.zeros(flat.shape[0], dtype=np.float64)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
        a_flat = a.reshape(-1)
        denom = np.maximum(np.abs(a_flat), np.abs(numeric))
        err = np.abs(a_flat - numeric)
        rel = np.where(denom > floor, err / np.maximum(denom, 1e-300), 0.0)
        if rel.size:
            max_err = max(max_err, float(rel.max()))
        n_total += flat.shape[0]
    return GradCheckReport(max_rel_error=max_err, tol=tol, n_elements=n_total)
