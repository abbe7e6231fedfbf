"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Forward ops record onto the innermost active GradTape; creation order is
a valid topological order, so backward() is one reverse sweep. Ops called
with no active tape compute values only, which is how inference and the
finite-difference probes in grad_check stay cheap. Edge-scale gathers and
segment reductions delegate to mmkg_align.kernels.

backward() frees the recorded graph by default. Tensors and the tape
reference each other, so a spent graph is cyclic garbage the reference
counter alone never reclaims — training loops would hoard every batch's
intermediates until a full gc pass. Pass retain=True to sweep the same
graph again.
"""

from __future__ import annotations

import math

import numpy as np

from mmkg_align import kernels


class NumericError(ArithmeticError):
    """Raised when an operation meets non-finite or out-of-domain values."""


_TAPE_STACK: list["GradTape"] = []

# Test hook: name of an op whose backward rule is deliberately corrupted,
# used to prove grad_check catches broken rules. None in normal operation.
_BACKWARD_FAULT: str | None = None


def set_backward_fault(op_name: str | None) -> None:
    global _BACKWARD_FAULT
    _BACKWARD_FAULT = op_name


class Tensor:
    """A float64 ndarray plus gradient metadata.

    Data is treated as immutable between forward and backward; optimizers
    mutate leaf .data in place between steps. .grad accumulates across
    backward passes until cleared.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: GradTape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def sum(self) -> "Tensor":
        return _reduce(self, "sum")

    def mean(self) -> "Tensor":
        return _reduce(self, "mean")

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def backward(self, retain: bool = False) -> None:
        backward(self, retain)

    def __add__(self, other):
        return _binary("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", other, self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __neg__(self):
        return _unary("neg", self, -self.data, lambda g, x: -g)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "out", "fn")

    def __init__(self, inputs, out, fn):
        self.inputs = inputs
        self.out = out
        self.fn = fn


class GradTape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.freed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(name, inputs, data, fn) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        if _BACKWARD_FAULT == name:
            inner = fn
            fn = lambda g: tuple(None if gi is None else gi * 1.001 for gi in inner(g))
        out._tape = tape
        tape.nodes.append(_Node(tuple(inputs), out, fn))
    return out


def backward(loss: Tensor, retain: bool = False) -> None:
    """Reverse sweep from a scalar loss.

    Fills .grad of every reachable requires_grad tensor; grads accumulate
    across sweeps. Unless retain is true the tape's nodes are dropped
    afterwards, breaking the tensor<->tape cycle so the graph frees by
    reference count instead of waiting on the cyclic collector.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("backward: loss was not recorded on an active GradTape")
    if loss._tape.freed:
        raise ValueError("backward: graph already freed; use backward(retain=True) "
                         "to sweep it more than once")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(loss._tape.nodes):
        g = flow.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.requires_grad:
            node.out.grad = g if node.out.grad is None else node.out.grad + g
        grads = node.fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            holders[key] = t
            flow[key] = gi if key not in flow else flow[key] + gi
    for key, g in flow.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
    if not retain:
        loss._tape.freed = True
        loss._tape.nodes.clear()


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def detach(x: Tensor) -> Tensor:
    return x.detach()


# ---------- elementwise and reduction ops ----------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(name, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        if name == "add":
            data = a.data + b.data
        elif name == "sub":
            data = a.data - b.data
        elif name == "mul":
            data = a.data * b.data
        else:
            data = a.data / b.data
    except ValueError:
        raise ValueError(
            f"{name}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None

    if name == "add":
        fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    elif name == "sub":
        fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    elif name == "mul":
        fn = lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    else:
        fn = lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )
    return _result(name, (a, b), data, fn)


def _unary(name, x, data, fn) -> Tensor:
    return _result(name, (x,), data, lambda g: (fn(g, x.data),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log: input has non-positive entries")
    return _unary("log", x, np.log(x.data), lambda g, d: g / d)


def relu(x: Tensor) -> Tensor:
    return _unary("relu", x, np.maximum(x.data, 0.0), lambda g, d: g * (d > 0.0))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    data = np.where(x.data > 0.0, x.data, slope * x.data)
    return _unary("leaky_relu", x, data, lambda g, d: g * np.where(d > 0.0, 1.0, slope))


def clip_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    data = np.maximum(x.data, floor)
    return _unary("clip_min", x, data, lambda g, d: g * (d > floor))


def _reduce(x: Tensor, kind: str) -> Tensor:
    if kind == "sum":
        return _unary("sum", x, np.asarray(x.data.sum()), lambda g, d: np.broadcast_to(g, d.shape).copy())
    scale = 1.0 / x.size
    return _unary(
        "mean", x, np.asarray(x.data.mean()), lambda g, d: np.broadcast_to(g * scale, d.shape).copy()
    )


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _unary("reshape", x, x.data.reshape(shape), lambda g, d: g.reshape(old))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _unary("dropout", x, x.data * keep, lambda g, d: g * keep)


# ---------- linear algebra ----------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    na, nb = a.requires_grad, b.requires_grad
    fn = lambda g: (
        g @ b.data.T if na else None,
        a.data.T @ g if nb else None,
    )
    return _result("matmul", (a, b), a.data @ b.data, fn)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {x.shape}")
    return _unary("transpose", x, x.data.T, lambda g, d: g.T)


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over each row of a matrix at the given temperature."""
    if x.ndim != 2:
        raise ValueError(f"row_softmax: expected a matrix, got shape {x.shape}")
    if temperature <= 0.0:
        raise ValueError(f"row_softmax: temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("row_softmax: non-finite input")
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner) / temperature,)

    return _result("row_softmax", (x,), y, fn)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm < 1e-12 pass through."""
    if x.ndim != 2:
        raise ValueError(f"l2_normalize_rows: expected a matrix, got shape {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    degenerate = norms < 1e-12
    safe = np.where(degenerate, 1.0, norms)
    y = x.data / safe

    def fn(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        gx = (g - inner * y) / safe
        return (np.where(degenerate, g, gx),)

    return _result("l2_normalize_rows", (x,), y, fn)


# ---------- shape assembly ----------


def concat_rows(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result("concat_rows", parts, data, fn)


def concat_cols(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result("concat_cols", parts, data, fn)


def stack(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.stack([p.data for p in parts])
    fn = lambda g: tuple(g[i] for i in range(len(parts)))
    return _result("stack", parts, data, fn)


# ---------- indexed gathers and segment reductions ----------


def _check_index(name, idx, n) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise IndexError(f"{name}: index array must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{name}: index out of range for size {n}")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows (or elements of a vector) by integer index, with repeats."""
    idx = _check_index("gather_rows", idx, x.shape[0])
    needs = x.requires_grad

    def fn(g):
        if not needs:
            return (None,)
        gx = np.zeros_like(x.data)
        g = np.ascontiguousarray(g)
        if gx.ndim == 2:
            kernels.scatter_add_rows(gx, idx, g)
        else:
            kernels.scatter_add_vec(gx, idx, g)
        return (gx,)

    return _result("gather_rows", (x,), x.data[idx], fn)


def take_per_row(x: Tensor, cols) -> Tensor:
    """out[i] = x[i, cols[i]]."""
    if x.ndim != 2:
        raise ValueError(f"take_per_row: expected a matrix, got shape {x.shape}")
    cols = _check_index("take_per_row", cols, x.shape[1])
    if cols.shape[0] != x.shape[0]:
        raise IndexError(
            f"take_per_row: need one column per row, got {cols.shape[0]} for {x.shape[0]} rows"
        )
    rows = np.arange(x.shape[0])

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, cols] = g
        return (gx,)

    return _result("take_per_row", (x,), x.data[rows, cols], fn)


def drop_diagonal(x: Tensor) -> Tensor:
    """Remove the diagonal of a square matrix, giving shape (n, n-1)."""
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"drop_diagonal: expected a square matrix, got shape {x.shape}")
    flat = np.flatnonzero(~np.eye(n, dtype=bool))

    def fn(g):
        gx = np.zeros(n * n)
        gx[flat] = g.ravel()
        return (gx.reshape(n, n),)

    return _result("drop_diagonal", (x,), x.data.ravel()[flat].reshape(n, n - 1), fn)


def segment_sum(x: Tensor, segments, out_rows: int) -> Tensor:
    """Sum vector entries into out_rows buckets given by segments."""
    if x.ndim != 1:
        raise ValueError(f"segment_sum: expected a vector, got shape {x.shape}")
    segments = _check_index("segment_sum", segments, out_rows)
    if segments.shape[0] != x.shape[0]:
        raise IndexError("segment_sum: segments length must match values length")
    data = kernels.segment_sum(np.ascontiguousarray(x.data), segments, out_rows)
    return _result("segment_sum", (x,), data, lambda g: (g[segments],))


def segment_max(x, segments, out_rows: int) -> np.ndarray:
    """Per-segment max as a plain array (no gradient); empty segments give -inf."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    segments = _check_index("segment_max", segments, out_rows)
    return kernels.segment_max(np.ascontiguousarray(data), segments, out_rows)


def segment_weighted_sum(values: Tensor, weights: Tensor, segments, out_rows: int) -> Tensor:
    """out[s] = sum over entries e with segments[e] == s of weights[e] * values[e].

    Differentiable in both values and weights.
    """
    if values.ndim != 2 or weights.ndim != 1 or values.shape[0] != weights.shape[0]:
        raise ValueError(
            f"segment_weighted_sum: incompatible shapes {values.shape} and {weights.shape}"
        )
    segments = _check_index("segment_weighted_sum", segments, out_rows)
    if segments.shape[0] != values.shape[0]:
        raise IndexError("segment_weighted_sum: segments length must match values length")
    vdata = np.ascontiguousarray(values.data)
    wdata = np.ascontiguousarray(weights.data)
    data = kernels.segment_weighted_sum(vdata, wdata, segments, out_rows)
    nv, nw = values.requires_grad, weights.requires_grad

    def fn(g):
        gv, gw = kernels.segment_weighted_sum_backward(
            np.ascontiguousarray(g), vdata, wdata, segments
        )
        return (gv if nv else None, gw if nw else None)

    return _result("segment_weighted_sum", (values, weights), data, fn)


# ---------- optimizer ----------


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Parameters whose .grad is None are skipped entirely, decay included.
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        zero_grads(self.params)

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------- gradient checking ----------


def grad_check(f, params, eps: float = 1e-5, atol: float = 1e-7) -> float:
    """Max relative error between tape gradients and central differences.

    f maps the params list to a scalar Tensor. Relative error per
    coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    Coordinates where both sides sit below atol are treated as jointly
    zero and skipped: central differences cannot resolve gradients at
    round-off scale, so comparing them would only measure noise.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    zero_grads(params)
    with GradTape():
        loss = f(params)
    if loss.size != 1 or not np.isfinite(loss.data):
        raise NumericError("grad_check: f must produce a finite scalar")
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    def probe() -> float:
        out = f(params)
        val = float(out.data)
        if not math.isfinite(val):
            raise NumericError("grad_check: f produced a non-finite value during probing")
        return val

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.ravel()
        aflat = a.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = probe()
            flat[i] = orig - eps
            f_minus = probe()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if max(abs(aflat[i]), abs(numeric)) < atol:
                continue
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
