"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy array, and an
explicit ``Tape`` records every differentiable operation executed while it is
active.  ``backward`` replays the tape in reverse and accumulates gradients
into the ``grad`` field of the participating leaves.  Coverage is exactly the
operation set the upper layers need (matrix products, elementwise maps,
softmax, layer normalization, reductions, norms, concatenation, slicing);
broadcasting is restricted to scalar-versus-tensor.

Tapes are single-writer: at most one tape is active per thread of execution,
and independent tapes never share nodes.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A dense float64 array with optional gradient storage.

    ``data`` is row-major; ``grad``, when populated by ``backward``, has the
    same shape.  Tensors are treated as immutable values once published by an
    operation.
    """

    __slots__ = ("array", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite data")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.array.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded operation: inputs, output, and a local backward rule.

    ``backward(out_grad)`` returns one gradient array per input (``None``
    where no gradient is needed).
    """

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple, output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of operations; context-managed, single-writer.

    Nodes are appended in execution order, which is a topological order of
    the computation graph, so the reverse sweep visits each node once with
    its output gradient already complete.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(output: Tensor, inputs: tuple, backward) -> None:
    if _ACTIVE_TAPE is not None and output.requires_grad:
        _ACTIVE_TAPE.nodes.append(_Node(inputs, output, backward))


def _out(value: np.ndarray, *inputs: Tensor) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.array = value
    t.requires_grad = any(i.requires_grad for i in inputs)
    t.grad = None
    return t


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``grad`` of every requires_grad leaf.

    ``output`` must be scalar.  Leaves are tensors that were never produced
    by a node of this tape; their ``grad`` fields accumulate across repeated
    backward calls (callers reset with ``zero_grad``).
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.array)}
    produced = {id(node.output) for node in tape.nodes}
    registry: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            registry[key] = inp
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for key, g in grads.items():
        leaf = registry.get(key)
        if leaf is None or key in produced or not leaf.requires_grad:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise arithmetic (same shape, or scalar on either side)
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # collapse a full-shape gradient back onto a scalar operand
    if t.shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = _out(a.array + float(b), a)
        _record(out, (a,), lambda g: (g,))
        return out
    _binary_shapes(a, b, "add")
    out = _out(a.array + b.array, a, b)
    _record(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = _out(a.array - float(b), a)
        _record(out, (a,), lambda g: (g,))
        return out
    _binary_shapes(a, b, "sub")
    out = _out(a.array - b.array, a, b)
    _record(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out = _out(a.array * c, a)
        _record(out, (a,), lambda g: (g * c,))
        return out
    _binary_shapes(a, b, "mul")
    out = _out(a.array * b.array, a, b)
    av, bv = a.array, b.array
    _record(out, (a, b), lambda g: (_reduce_to(g * bv, a), _reduce_to(g * av, b)))
    return out


def reciprocal(a: Tensor) -> Tensor:
    out = _out(1.0 / a.array, a)
    v = out.array
    _record(out, (a,), lambda g: (-g * v * v,))
    return out


def square(a: Tensor) -> Tensor:
    out = _out(a.array * a.array, a)
    av = a.array
    _record(out, (a,), lambda g: (2.0 * g * av,))
    return out


def exp(a: Tensor) -> Tensor:
    out = _out(np.exp(a.array), a)
    v = out.array
    _record(out, (a,), lambda g: (g * v,))
    return out


def log(a: Tensor) -> Tensor:
    out = _out(np.log(a.array), a)
    av = a.array
    _record(out, (a,), lambda g: (g / av,))
    return out


def relu(a: Tensor) -> Tensor:
    out = _out(np.maximum(a.array, 0.0), a)
    mask = (a.array > 0.0).astype(np.float64)
    _record(out, (a,), lambda g: (g * mask,))
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    x = a.array
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    out = _out(0.5 * x * (1.0 + t), a)

    def bwd(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    _record(out, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = _out(a.array @ b.array, a, b)
    av, bv = a.array, b.array
    _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))
    return out


def transpose(a: Tensor) -> Tensor:
    if a.array.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = _out(np.ascontiguousarray(a.array.T), a)
    _record(out, (a,), lambda g: (g.T,))
    return out


def frobenius_norm(a: Tensor) -> Tensor:
    """sqrt of the sum of squared entries; subgradient 0 at the zero tensor."""
    n = float(np.sqrt(np.sum(a.array * a.array)))
    out = _out(np.asarray(n), a)
    av = a.array

    def bwd(g):
        if n == 0.0:
            return (np.zeros_like(av),)
        return (float(g) * av / n,)

    _record(out, (a,), bwd)
    return out


def spectral_norm(m: Tensor, max_iters: int = 100, tol: float = 1e-10):
    """Largest singular value by power iteration on MᵀM.

    Deterministic all-ones start vector, falling back to e1 when that start
    is annihilated after one iterate.  Returns ``(sigma, converged)`` where
    ``sigma`` is a scalar tensor whose backward rule is the outer product of
    the top singular vectors.
    """
    if max_iters < 1:
        raise ContractError("spectral_norm needs max_iters >= 1")
    a = m.array
    if a.ndim != 2:
        raise ShapeError(f"spectral_norm expects a 2-D tensor, got {m.shape}")
    if not np.isfinite(a).all():
        raise NumericError("spectral_norm on non-finite entries")
    k = a.shape[1]
    gram = a.T @ a
    v = np.ones(k) / math.sqrt(k)
    w = gram @ v
    if np.linalg.norm(w) < 1e-30:
        v = np.zeros(k)
        v[0] = 1.0
        w = gram @ v
    converged = False
    sigma = 0.0
    prev = None
    for _ in range(max_iters):
        nw = np.linalg.norm(w)
        if nw < 1e-300:
            sigma = 0.0
            converged = True
            break
        v_new = w / nw
        sigma = float(np.linalg.norm(a @ v_new))
        if prev is not None and abs(sigma - prev) < tol * max(sigma, 1e-300):
            converged = True
        # the Rayleigh estimate converges twice as fast as the vector; keep
        # polishing v (it feeds the gradient) until it stabilizes too
        v_change = float(np.linalg.norm(v_new - v))
        v = v_new
        if converged and v_change < tol:
            break
        prev = sigma
        w = gram @ v

    out = _out(np.asarray(sigma), m)
    if sigma > 0.0:
        u = (a @ v) / sigma
        uvT = np.outer(u, v)
        _record(out, (m,), lambda g: (float(g) * uvT,))
    else:
        _record(out, (m,), lambda g: (np.zeros_like(a),))
    return out, converged


# ---------------------------------------------------------------------------
# reductions, softmax, layer norm
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _out(np.asarray(a.array.sum(axis=axis, keepdims=keepdims)), a)
    shape = a.array.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g).reshape(()), shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    _record(out, (a,), bwd)
    return out


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = _out(np.asarray(a.array.mean(axis=axis, keepdims=keepdims)), a)
    shape = a.array.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g).reshape(()), shape).copy() / count,)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy() / count,)

    _record(out, (a,), bwd)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.array
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y, a)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (a,), bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs features {d}")
    xv = x.array
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = _out(xhat * gain.array + bias.array, x, gain, bias)
    gv = gain.array

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    _record(out, (x, gain, bias), bwd)
    return out


# ---------------------------------------------------------------------------
# concatenation and slicing
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    value = np.concatenate([t.array for t in tensors], axis=axis)
    t0 = Tensor.__new__(Tensor)
    t0.array = value
    t0.requires_grad = any(t.requires_grad for t in tensors)
    t0.grad = None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    _record(t0, tuple(tensors), bwd)
    return t0


def slice_(a: Tensor, key) -> Tensor:
    if isinstance(key, np.ndarray) or (isinstance(key, tuple)
                                       and any(isinstance(k, np.ndarray) for k in key)):
        raise ContractError("only basic slicing is supported")
    out = _out(np.ascontiguousarray(a.array[key]), a)
    shape = a.array.shape

    def bwd(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    _record(out, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Worst relative gap between taped and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor and be evaluable at ``x`` and
    at every ``x ± eps`` coordinate perturbation.  The relative gap uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)`` per coordinate.
    """
    probe = Tensor(x.array.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if not np.isfinite(out.array).all():
            raise NumericError("grad_check objective is non-finite at x")
        backward(tape, out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.array)

    flat = x.array.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - eps
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError("grad_check objective non-finite under perturbation")
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
