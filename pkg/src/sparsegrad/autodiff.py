"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is recorded on an explicit :class:`Tape`. Operations executed
while a tape is active append nodes in execution order, which is by
construction a topological order; ``Tape.backward`` walks that record once
in reverse. Leaf tensors (created with ``requires_grad=True``) accumulate
gradients into ``.grad`` across backward passes, so a forward graph can be
differentiated several times and the per-parameter sums add up. Operations
executed with no active tape just compute values (inference mode).
"""

from __future__ import annotations

import numpy as np

_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Append-only record of operations for one reverse pass scope."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes.clear()

    def backward(self, loss: "Tensor"):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

        ``loss`` must be a scalar. A constant loss (not recorded on any
        tape) contributes zero gradient everywhere and is a no-op.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if loss.rule is None:
            if loss.requires_grad:  # bare leaf: d loss / d loss = 1
                loss._accumulate(np.ones_like(loss.data))
            return
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        adjoint = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.rule is None:
                    parent._accumulate(pg)
                else:
                    key = id(parent)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + pg
                    else:
                        adjoint[key] = np.array(pg, dtype=np.float64, copy=True)


class Tensor:
    """A dense float64 array, optionally a node in a taped computation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "rule", "tape")

    def __init__(self, data, requires_grad=False, *, op="leaf", parents=(), rule=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.rule = rule
        self.tape = tape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

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
        return Tensor(self.data)

    def assert_finite(self, label="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{label} contains NaN or Inf")
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, data, parents, rule) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        node = Tensor(data, requires_grad=True, op=op, parents=tuple(parents), rule=rule, tape=tape)
        tape._nodes.append(node)
        return node
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (with numpy broadcasting)

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("div", a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float):
    a = as_tensor(a)
    p = float(p)
    return _record("pow", a.data ** p, (a,),
                   lambda g: (g * p * a.data ** (p - 1.0),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid_np(x):
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)
    return s


def sigmoid(a):
    """Elementwise 1/(1+exp(-x)); backward rule s*(1-s)."""
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a):
    """Elementwise ln(1+exp(x)) via the stable branch max(x,0)+log1p(exp(-|x|))."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid_np(a.data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float):
    """Clip into [lo, hi]; the clip is part of the graph (zero gradient outside)."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape and reductions

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), rule)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# gather / sparse primitives

def index_rows(a, idx):
    """Fancy-gather along axis 0: out = a[idx], idx may repeat rows.

    ``idx`` can have any shape; the output has shape idx.shape + a.shape[1:].
    Backward scatter-adds into the source rows.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"index_rows out of bounds for length {a.shape[0]}")

    def rule(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record("index_rows", a.data[idx], (a,), rule)


def coo_matmul(values, rows, cols, n_rows: int, x):
    """Multiply a sparse COO matrix by a dense vector or matrix.

    The matrix has shape (n_rows, x.shape[0]) with entry ``values[j]`` at
    ``(rows[j], cols[j])``; repeated index pairs sum. Gradients flow to the
    values and to ``x``; the integer indices are constants.
    """
    values, x = as_tensor(values), as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if values.ndim != 1 or rows.shape != values.shape or cols.shape != values.shape:
        raise ValueError("values, rows, cols must be matching 1-d arrays")
    if x.ndim not in (1, 2):
        raise ValueError(f"x must be 1-d or 2-d, got shape {x.shape}")
    n_cols = x.shape[0]
    if rows.size:
        if rows.min() < 0 or rows.max() >= n_rows:
            raise IndexError(f"row index out of bounds for {n_rows} rows")
        if cols.min() < 0 or cols.max() >= n_cols:
            raise IndexError(f"column index out of bounds for {n_cols} columns")

    vec = x.ndim == 1

    def scatter_rows(target_rows, length, contrib):
        # bincount beats np.add.at by a wide margin on long vectors
        if contrib.ndim == 1:
            return np.bincount(target_rows, weights=contrib, minlength=length)
        out = np.empty((length, contrib.shape[1]))
        for j in range(contrib.shape[1]):
            out[:, j] = np.bincount(target_rows, weights=contrib[:, j], minlength=length)
        return out

    xd = x.data
    out = scatter_rows(rows, n_rows, values.data * xd[cols] if vec
                       else values.data[:, None] * xd[cols])

    def rule(g):
        if vec:
            gv = xd[cols] * g[rows]
        else:
            gv = (xd[cols] * g[rows]).sum(axis=1)
        gx = None
        if x.requires_grad:
            gx = scatter_rows(cols, n_cols, values.data * g[rows] if vec
                              else values.data[:, None] * g[rows])
        return (gv, gx)

    return _record("coo_matmul", out, (values, x), rule)


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred, target):
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


BCE_CLAMP = 1e-6


def bce_loss(pred, target):
    """Mean binary cross-entropy; predictions clamped to [1e-6, 1-1e-6] in-graph."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target
    ll = add(mul(t, log(p)), mul(sub(1.0, t), log(sub(1.0, p))))
    return neg(tmean(ll))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer class labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    shift = logits.data.max(axis=1, keepdims=True)  # constant shift, gradient cancels
    z = sub(logits, shift)
    logsum = log(tsum(exp(z), axis=1, keepdims=True))
    logp = sub(z, logsum)
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    return neg(mul(tsum(mul(logp, onehot)), 1.0 / b))


# ---------------------------------------------------------------------------
# parameters, layers, optimizer

def glorot_uniform(rng, fan_in: int, fan_out: int, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out) if shape is None else shape)


class Linear:
    """Dense affine layer with uniform Glorot-initialized weights."""

    def __init__(self, n_in: int, n_out: int, rng):
        self.weight = Tensor(glorot_uniform(rng, n_in, n_out), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return add(matmul(as_tensor(x), self.weight), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, n_in: int, hidden: list[int], n_out: int, rng):
        sizes = [n_in, *hidden, n_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        h = as_tensor(x)
        for layer in self.layers[:-1]:
            h = relu(layer(h))
        return self.layers[-1](h)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class Adam:
    """Adam with bias correction; moments per parameter, shapes pinned at init."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != self.m[i].shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {self.m[i].shape}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
