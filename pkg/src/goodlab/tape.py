"""Dense-tensor algebra with reverse-mode differentiation.

Just enough machinery for the models and objectives in this package: a Value
wraps a float64 ndarray, ops build an acyclic graph, and `backward` visits
each node exactly once in reverse topological order. Every op checks its
output for non-finite entries so a diverging run fails at the first bad
intermediate instead of at the end of an epoch.

64-bit floats throughout; the theory-oracle tolerances depend on it.
"""

import numpy as np

__all__ = [
    "Value", "NonFiniteError", "DivergenceError", "backward", "zero_grad",
    "gradcheck", "sgd_step", "AdamState", "OPS",
]

OPS: list[str] = []


def _op(fn):
    OPS.append(fn.__name__)
    return fn


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf (training divergence)."""


class DivergenceError(RuntimeError):
    """Optimizer received non-finite gradients."""


class Value:
    """Node of the computation graph: float64 data plus cached gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values entering op '{op}'")
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data, parents, backward, op):
    return Value(data, parents=parents, backward=backward, op=op)


def _acc(v: Value, g: np.ndarray):
    if v.requires_grad:
        if v.grad is None:
            v.grad = np.zeros_like(v.data)
        v.grad += g


def backward(root: Value) -> None:
    """Reverse-mode sweep from a scalar root."""
    if root.data.shape != ():
        raise ValueError("backward expects a scalar root")
    topo, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

@_op
def add(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    def bw(g):
        _acc(a, g)
        _acc(b, g)
    return _make(a.data + b.data, (a, b), bw, "add")


@_op
def sub(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    def bw(g):
        _acc(a, g)
        _acc(b, -g)
    return _make(a.data - b.data, (a, b), bw, "sub")


@_op
def scale(a: Value, c: float) -> Value:
    a = as_value(a)
    c = float(c)
    def bw(g):
        _acc(a, c * g)
    return _make(c * a.data, (a,), bw, "scale")


@_op
def scalar_mul(s: Value, a: Value) -> Value:
    """Scalar Value times tensor Value."""
    s, a = as_value(s), as_value(a)
    if s.data.shape != ():
        raise ValueError("scalar_mul expects a scalar first argument")
    def bw(g):
        _acc(s, np.asarray((g * a.data).sum()))
        _acc(a, float(s.data) * g)
    return _make(float(s.data) * a.data, (s, a), bw, "scalar_mul")


@_op
def hadamard(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    return _make(a.data * b.data, (a, b), bw, "hadamard")


@_op
def matmul(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _scatter_rows(out, rows, contributions):
    """out[rows] += contributions, using reduceat when rows are sorted."""
    if rows.size and np.all(rows[1:] >= rows[:-1]):
        uniq, starts = np.unique(rows, return_index=True)
        out[uniq] += np.add.reduceat(contributions, starts, axis=0)
    else:
        np.add.at(out, rows, contributions)


@_op
def sparse_dense_matmul(values: Value, rows: np.ndarray, cols: np.ndarray,
                        num_rows: int, dense: Value) -> Value:
    """(sparse with given COO structure) @ dense; differentiable in both the
    nonzero values and the dense operand."""
    values, dense = as_value(values), as_value(dense)
    vec = dense.data.ndim == 1
    d = dense.data[:, None] if vec else dense.data
    out = np.zeros((num_rows, d.shape[1]), dtype=np.float64)
    _scatter_rows(out, rows, values.data[:, None] * d[cols])
    def bw(g):
        gm = g[:, None] if vec else g
        if values.requires_grad:
            _acc(values, (gm[rows] * d[cols]).sum(axis=1))
        if dense.requires_grad:
            gd = np.zeros_like(d)
            np.add.at(gd, cols, values.data[:, None] * gm[rows])
            _acc(dense, gd[:, 0] if vec else gd)
    return _make(out[:, 0] if vec else out, (values, dense), bw, "sparse_dense_matmul")


@_op
def relu(a: Value) -> Value:
    a = as_value(a)
    mask = a.data > 0
    def bw(g):
        _acc(a, g * mask)
    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


@_op
def leaky_relu(a: Value, slope: float = 0.2) -> Value:
    a = as_value(a)
    mask = a.data > 0
    def bw(g):
        _acc(a, g * np.where(mask, 1.0, slope))
    return _make(np.where(mask, a.data, slope * a.data), (a,), bw, "leaky_relu")


@_op
def sigmoid(a: Value) -> Value:
    a = as_value(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    def bw(g):
        _acc(a, g * y * (1.0 - y))
    return _make(y, (a,), bw, "sigmoid")


@_op
def log(a: Value) -> Value:
    a = as_value(a)
    def bw(g):
        _acc(a, g / a.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _make(np.log(a.data), (a,), bw, "log")


@_op
def powc(a: Value, exponent: float) -> Value:
    """Elementwise power with a constant exponent (positive base assumed)."""
    a = as_value(a)
    p = float(exponent)
    def bw(g):
        _acc(a, g * p * a.data ** (p - 1.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        return _make(a.data ** p, (a,), bw, "powc")


@_op
def clamp(a: Value, lo: float, hi: float) -> Value:
    """Clip with pass-through gradient strictly inside the interval."""
    a = as_value(a)
    inside = (a.data > lo) & (a.data < hi)
    def bw(g):
        _acc(a, g * inside)
    return _make(np.clip(a.data, lo, hi), (a,), bw, "clamp")


@_op
def row_softmax(a: Value) -> Value:
    a = as_value(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _acc(a, y * (g - dot))
    return _make(y, (a,), bw, "row_softmax")


@_op
def segment_softmax(a: Value, indptr: np.ndarray) -> Value:
    """Softmax over contiguous segments of a 1-D tensor (CSR row order)."""
    a = as_value(a)
    if a.data.size == 0:
        return _make(a.data.copy(), (a,), lambda g: _acc(a, g), "segment_softmax")
    lengths = np.diff(indptr)
    nonempty = lengths > 0
    starts = indptr[:-1][nonempty]
    seg_max = np.maximum.reduceat(a.data, starts)
    per_elem_max = np.repeat(seg_max, lengths[nonempty])
    e = np.exp(a.data - per_elem_max)
    seg_sum = np.add.reduceat(e, starts)
    y = e / np.repeat(seg_sum, lengths[nonempty])
    def bw(g):
        dots = np.add.reduceat(g * y, starts)
        _acc(a, y * (g - np.repeat(dots, lengths[nonempty])))
    return _make(y, (a,), bw, "segment_softmax")


@_op
def segment_sum(a: Value, seg: np.ndarray, num_segments: int) -> Value:
    a = as_value(a)
    out = np.zeros(num_segments, dtype=np.float64)
    np.add.at(out, seg, a.data)
    def bw(g):
        _acc(a, g[seg])
    return _make(out, (a,), bw, "segment_sum")


@_op
def gather_rows(a: Value, idx: np.ndarray) -> Value:
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _acc(a, ga)
    return _make(a.data[idx], (a,), bw, "gather_rows")


@_op
def row_sum(a: Value) -> Value:
    """(N, D) -> (N,) row sums."""
    a = as_value(a)
    def bw(g):
        _acc(a, np.repeat(g[:, None], a.data.shape[1], axis=1))
    return _make(a.data.sum(axis=1), (a,), bw, "row_sum")


@_op
def concat1d(parts) -> Value:
    parts = [as_value(p) for p in parts]
    sizes = [p.data.size for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    def bw(g):
        for k, p in enumerate(parts):
            _acc(p, g[offsets[k]:offsets[k + 1]])
    return _make(np.concatenate([p.data for p in parts]), tuple(parts), bw, "concat1d")


@_op
def add_rowvec(a: Value, b: Value) -> Value:
    """(N, D) + (D,) broadcast add, the one broadcast the models need."""
    a, b = as_value(a), as_value(b)
    def bw(g):
        _acc(a, g)
        _acc(b, g.sum(axis=0))
    return _make(a.data + b.data[None, :], (a, b), bw, "add_rowvec")


@_op
def stack_scalars(parts) -> Value:
    parts = [as_value(p) for p in parts]
    def bw(g):
        for k, p in enumerate(parts):
            _acc(p, np.asarray(g[k]))
    return _make(np.array([float(p.data) for p in parts]), tuple(parts), bw, "stack_scalars")


@_op
def tsum(a: Value) -> Value:
    a = as_value(a)
    def bw(g):
        _acc(a, np.full_like(a.data, float(g)))
    return _make(np.asarray(a.data.sum()), (a,), bw, "tsum")


@_op
def tmean(a: Value) -> Value:
    a = as_value(a)
    n = a.data.size
    def bw(g):
        _acc(a, np.full_like(a.data, float(g) / n))
    return _make(np.asarray(a.data.mean()), (a,), bw, "tmean")


@_op
def population_variance(a: Value) -> Value:
    """Variance with the 1/n convention (exactly 0 for constant input)."""
    a = as_value(a)
    n = a.data.size
    mu = a.data.mean()
    def bw(g):
        _acc(a, float(g) * 2.0 * (a.data - mu) / n)
    return _make(np.asarray(np.mean((a.data - mu) ** 2)), (a,), bw, "population_variance")


@_op
def sq_l2_norm(a: Value) -> Value:
    a = as_value(a)
    def bw(g):
        _acc(a, float(g) * 2.0 * a.data)
    return _make(np.asarray((a.data ** 2).sum()), (a,), bw, "sq_l2_norm")


@_op
def row_sqnorm(a: Value) -> Value:
    """(N, D) -> (N,) squared L2 norms of rows."""
    a = as_value(a)
    def bw(g):
        _acc(a, g[:, None] * 2.0 * a.data)
    return _make((a.data ** 2).sum(axis=1), (a,), bw, "row_sqnorm")


@_op
def cross_entropy_with_logits(logits: Value, onehot: np.ndarray, rows=None) -> Value:
    """Mean cross-entropy over the selected rows (all rows when rows=None)."""
    logits = as_value(logits)
    rows = np.arange(logits.data.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("cross_entropy_with_logits: empty row selection")
    z = logits.data[rows]
    y = onehot[rows] if onehot.shape[0] == logits.data.shape[0] else onehot
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + z.max(axis=1)
    loss = (lse - (z * y).sum(axis=1)).mean()
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    def bw(g):
        gl = np.zeros_like(logits.data)
        np.add.at(gl, rows, float(g) * (p - y) / rows.size)
        _acc(logits, gl)
    return _make(np.asarray(loss), (logits,), bw, "cross_entropy_with_logits")


@_op
def mse(pred: Value, target: np.ndarray, rows=None) -> Value:
    """Mean squared error over the selected rows of a vector or matrix."""
    pred = as_value(pred)
    rows = np.arange(pred.data.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("mse: empty row selection")
    diff = pred.data[rows] - (target[rows] if target.shape[0] == pred.data.shape[0] else target)
    count = diff.size
    def bw(g):
        gp = np.zeros_like(pred.data)
        np.add.at(gp, rows, float(g) * 2.0 * diff / count)
        _acc(pred, gp)
    return _make(np.asarray((diff ** 2).mean()), (pred,), bw, "mse")


# ---------------------------------------------------------------------------
# Gradient checking and optimizers
# ---------------------------------------------------------------------------

def gradcheck(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must return a scalar Value computed from `params` (a list of Values).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    zero_grad(params)
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana) + abs(num), 1.0)
            worst = max(worst, err)
    return worst


def sgd_step(params, lr: float) -> None:
    for k, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {k} (op {p.op})")
        p.data = p.data - lr * g


class AdamState:
    """Adam with bias correction; defaults beta=(0.9, 0.999), eps=1e-8."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, params) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in enumerate(params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite gradient in parameter {k}: |g|max="
                    f"{np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'nan'}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
