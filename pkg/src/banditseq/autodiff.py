"""Dense float64 tensors with reverse-mode automatic differentiation.

Small tape-based autodiff, just rich enough for a GRU encoder-decoder with
attention: rank-2 matmul, matrix-vector products, the usual elementwise
functions, softmax/logsumexp, embedding rows, and concatenation. Values are
numpy float64 arrays; scalars are shape-() arrays. There is no broadcasting
except scalar-with-tensor, which keeps every reverse rule a one-liner.

A graph is recorded on the active :class:`Tape` (one per training example,
discarded after backward). Operations called while no tape is active, or
inside :func:`no_grad`, compute values only.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "no_grad",
    "parameter",
    "constant",
    "matmul",
    "matvec",
    "dot",
    "add",
    "mul",
    "neg",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "logsumexp",
    "pick",
    "vsum",
    "concat",
    "stack",
    "stack_rows",
    "vecmat",
    "embedding_lookup",
    "gru_cell",
    "attention_weights",
    "weighted_rows",
    "token_log_prob",
    "ELEMENTWISE_OPS",
    "finite_difference_check",
    "FiniteDifferenceReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A node in the computation graph: a float64 array plus a gradient slot.

    Leaf tensors (parameters, constants) have no backward rule. Interior
    nodes carry a closure that scatters the incoming gradient to their
    parents' ``grad`` accumulators.
    """

    __slots__ = ("data", "grad", "name", "_backward")

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"

    def item(self):
        return float(self.data)

    # Operator sugar; subtraction is add(neg(..)) so the op set stays minimal.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._outer = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._outer
        return False

    def zero_grads(self):
        for node in self.nodes:
            node.grad = None

    def backward(self, root, params):
        """Backpropagate from a scalar ``root``; return a gradient map.

        Every parameter in ``params`` (name -> leaf Tensor) gets an entry;
        parameters the root does not depend on get zeros. Gradients on the
        tape and on the parameters are cleared first, so repeated calls on
        one tape (e.g. for two roots sharing subgraphs) are independent.
        """
        if root.data.shape != ():
            raise ValueError(
                f"backward root must be a scalar, got shape {root.data.shape}"
            )
        self.zero_grads()
        for p in params.values():
            p.grad = None
        root.grad = np.ones(())
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        out = {}
        for name, p in params.items():
            out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.grad = None
        return out


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._outer = _active_tape()
        _state.tape = None
        return self

    def __exit__(self, *exc):
        _state.tape = self._outer
        return False


def parameter(name, data):
    """Named leaf tensor; gradients are collected for it by ``backward``."""
    return Tensor(data, name=name)


def constant(data):
    return Tensor(data)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g)  # copy: g may view a buffer someone else owns
    else:
        t.grad += g


def _make(data, backward):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        out._backward = backward
        tape.nodes.append(out)
    return out


def _reduce_to(g, shape):
    # Only scalar-with-tensor broadcasting exists, so the sole reduction is
    # summing a full gradient down to a scalar operand.
    if shape == () and g.shape != ():
        return g.sum()
    return g


def _check_binary_shapes(op, a, b):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sigmoid_values(x):
    # tanh form: numerically stable and a single ufunc call
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _outer(a, b):
    return a[:, None] * b


def matmul(a, b):
    """Rank-2 matrix product with the standard reverse rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, backward)


def matvec(m, v):
    """Matrix [r,c] times vector [c] -> vector [r]."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {m.shape} and {v.shape}")

    def backward(g):
        _accum(m, _outer(g, v.data))
        _accum(v, m.data.T @ g)

    return _make(m.data @ v.data, backward)


def dot(a, b):
    """Inner product of two equal-length vectors -> scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data @ b.data, backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("add", a, b)

    def backward(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _make(a.data + b.data, backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("mul", a, b)

    def backward(g):
        _accum(a, _reduce_to(g * b.data, a.shape))
        _accum(b, _reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, backward)


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, backward)


def sigmoid(a):
    a = _as_tensor(a)
    y = _sigmoid_values(a.data)

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, backward)


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)

    def backward(g):
        _accum(a, g * y)

    return _make(y, backward)


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: domain error, operand has non-positive entries")

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), backward)


def softmax(a):
    """Softmax of a rank-1 vector, computed with max-subtraction."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.shape[0] == 0:
        raise ShapeError(f"softmax: expected non-empty rank-1 input, got {a.shape}")
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()

    def backward(g):
        _accum(a, y * (g - g @ y))

    return _make(y, backward)


def logsumexp(a):
    """log(sum(exp(x))) of a rank-1 vector -> scalar, max-subtracted."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.shape[0] == 0:
        raise ShapeError(f"logsumexp: expected non-empty rank-1 input, got {a.shape}")
    m = a.data.max()
    e = np.exp(a.data - m)
    s = e.sum()
    y = m + np.log(s)
    p = e / s

    def backward(g):
        _accum(a, g * p)

    return _make(y, backward)


def pick(a, index):
    """Select entry ``index`` of a rank-1 vector -> scalar."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"pick: expected rank-1 input, got {a.shape}")
    index = int(index)
    if not 0 <= index < a.shape[0]:
        raise IndexError(f"pick: index {index} out of range for length {a.shape[0]}")

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return _make(a.data[index], backward)


def vsum(a):
    """Sum of all entries -> scalar."""
    a = _as_tensor(a)

    def backward(g):
        _accum(a, np.full_like(a.data, g))

    return _make(a.data.sum(), backward)


def concat(parts):
    """Concatenate rank-1 vectors into one vector."""
    parts = [_as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 1 for p in parts):
        raise ShapeError("concat: expects a non-empty list of rank-1 tensors")
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[off:off + n])
            off += n

    return _make(np.concatenate([p.data for p in parts]), backward)


def stack(scalars):
    """Stack scalar tensors into a rank-1 vector."""
    scalars = [_as_tensor(s) for s in scalars]
    if not scalars or any(s.data.shape != () for s in scalars):
        raise ShapeError("stack: expects a non-empty list of scalar tensors")

    def backward(g):
        for i, s in enumerate(scalars):
            _accum(s, g[i])

    return _make(np.array([s.data for s in scalars]), backward)


def embedding_lookup(table, index):
    """Copy row ``index`` of a rank-2 table; backward scatters into that row."""
    table = _as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: expected rank-2 table, got {table.shape}")
    index = int(index)
    if not 0 <= index < table.shape[0]:
        raise IndexError(
            f"embedding_lookup: row {index} out of range for table with "
            f"{table.shape[0]} rows"
        )

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        table.grad[index] += g

    return _make(table.data[index].copy(), backward)


# Registry used by property tests to sweep the elementwise kinds.
ELEMENTWISE_OPS = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "neg": neg,
    "add": add,
    "mul": mul,
}


# ---------------------------------------------------------------------------
# Fused operations. Recurrent models spend their time in a handful of fixed
# patterns; recording those as single nodes with hand-written reverse rules
# keeps graphs per training example small. Each fused rule is checked
# against finite differences and against its elementary-op composition in
# the test suite.
# ---------------------------------------------------------------------------


def stack_rows(vectors):
    """Stack rank-1 tensors of equal length into a rank-2 matrix."""
    vectors = [_as_tensor(v) for v in vectors]
    if not vectors or any(v.data.ndim != 1 for v in vectors):
        raise ShapeError("stack_rows: expects a non-empty list of rank-1 tensors")

    def backward(g):
        for i, v in enumerate(vectors):
            _accum(v, g[i])

    return _make(np.stack([v.data for v in vectors]), backward)


def vecmat(v, m):
    """Vector [n] times matrix [n,k] -> vector [k]."""
    v, m = _as_tensor(v), _as_tensor(m)
    if v.data.ndim != 1 or m.data.ndim != 2 or v.shape[0] != m.shape[0]:
        raise ShapeError(f"vecmat: incompatible shapes {v.shape} and {m.shape}")

    def backward(g):
        _accum(v, m.data @ g)
        _accum(m, _outer(v.data, g))

    return _make(v.data @ m.data, backward)


def gru_cell(x, h, wz, uz, bz, wr, ur, br, wh, uh, bh):
    """Full gated-recurrent-unit transition as one node.

    Computes ``z = sig(Wz x + Uz h + bz)``, ``r = sig(Wr x + Ur h + br)``,
    ``c = tanh(Wh x + Uh (r*h) + bh)`` and returns ``(1-z)*h + z*c``.
    """
    x, h = _as_tensor(x), _as_tensor(h)
    wz, uz, bz = _as_tensor(wz), _as_tensor(uz), _as_tensor(bz)
    wr, ur, br = _as_tensor(wr), _as_tensor(ur), _as_tensor(br)
    wh, uh, bh = _as_tensor(wh), _as_tensor(uh), _as_tensor(bh)
    xd, hd = x.data, h.data
    z = _sigmoid_values(wz.data @ xd + uz.data @ hd + bz.data)
    r = _sigmoid_values(wr.data @ xd + ur.data @ hd + br.data)
    rh = r * hd
    c = np.tanh(wh.data @ xd + uh.data @ rh + bh.data)
    out = (1.0 - z) * hd + z * c

    def backward(g):
        dz = g * (c - hd)
        da_c = (g * z) * (1.0 - c * c)
        dh = g * (1.0 - z)
        _accum(wh, _outer(da_c, xd))
        _accum(uh, _outer(da_c, rh))
        _accum(bh, da_c)
        drh = uh.data.T @ da_c
        dh += drh * r
        da_r = (drh * hd) * r * (1.0 - r)
        _accum(wr, _outer(da_r, xd))
        _accum(ur, _outer(da_r, hd))
        _accum(br, da_r)
        dh += ur.data.T @ da_r
        da_z = dz * z * (1.0 - z)
        _accum(wz, _outer(da_z, xd))
        _accum(uz, _outer(da_z, hd))
        _accum(bz, da_z)
        dh += uz.data.T @ da_z
        _accum(h, dh)
        _accum(x, wh.data.T @ da_c + wr.data.T @ da_r + wz.data.T @ da_z)

    return _make(out, backward)


def attention_weights(state, proj, w, v):
    """Alignment weights: softmax over ``tanh(proj + W state) . v`` rows.

    ``proj`` is the per-position projection of the encoder states (shape
    [T, A]); ``state`` is the decoder state the energies are conditioned
    on. Returns the simplex vector over the T positions.
    """
    state, proj = _as_tensor(state), _as_tensor(proj)
    w, v = _as_tensor(w), _as_tensor(v)
    if proj.data.ndim != 2 or proj.shape[1] != v.shape[0]:
        raise ShapeError(
            f"attention_weights: projection {proj.shape} does not match "
            f"energy vector {v.shape}"
        )
    q = w.data @ state.data
    t = np.tanh(proj.data + q)
    e = t @ v.data
    m = e.max()
    ex = np.exp(e - m)
    alpha = ex / ex.sum()

    def backward(g):
        de = alpha * (g - g @ alpha)
        dt = _outer(de, v.data)
        _accum(v, t.T @ de)
        dp = dt * (1.0 - t * t)
        _accum(proj, dp)
        dq = dp.sum(axis=0)
        _accum(w, _outer(dq, state.data))
        _accum(state, w.data.T @ dq)

    return _make(alpha, backward)


def weighted_rows(alpha, rows):
    """Convex (or any) combination of matrix rows: ``alpha @ rows``."""
    alpha, rows = _as_tensor(alpha), _as_tensor(rows)
    if alpha.data.ndim != 1 or rows.data.ndim != 2 \
            or alpha.shape[0] != rows.shape[0]:
        raise ShapeError(
            f"weighted_rows: incompatible shapes {alpha.shape} and {rows.shape}"
        )

    def backward(g):
        _accum(alpha, rows.data @ g)
        _accum(rows, _outer(alpha.data, g))

    return _make(alpha.data @ rows.data, backward)


def token_log_prob(logits, token, negated=False):
    """log softmax(l)[token] with ``l`` the logits or their negation,
    computed as logit - logsumexp. One node per emitted token."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"token_log_prob: expected rank-1 logits, got "
                         f"{logits.shape}")
    token = int(token)
    if not 0 <= token < logits.shape[0]:
        raise IndexError(
            f"token_log_prob: token {token} out of range for "
            f"{logits.shape[0]} logits"
        )
    l = -logits.data if negated else logits.data
    m = l.max()
    ex = np.exp(l - m)
    s = ex.sum()
    out = l[token] - (m + np.log(s))
    p = ex / s

    def backward(g):
        dl = (-g) * p
        dl[token] += g
        _accum(logits, -dl if negated else dl)

    return _make(out, backward)


@dataclass
class FiniteDifferenceReport:
    """Outcome of a central-difference gradient check."""

    max_rel_error: float
    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def finite_difference_check(f, params, step=1e-5, tolerance=1e-4):
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` maps the parameter dict to a scalar Tensor and may be evaluated
    repeatedly; parameter data is perturbed in place and restored. The
    relative error for an entry is |a - n| / max(|a|, |n|, 1), so zero
    gradients compare cleanly.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    with Tape() as tape:
        out = f(params)
    if not np.isfinite(out.data):
        raise ValueError("finite_difference_check: f evaluated to a non-finite value")
    analytic = tape.backward(out, params)

    def evaluate():
        with no_grad():
            val = float(f(params).data)
        if not np.isfinite(val):
            raise ValueError(
                "finite_difference_check: f evaluated to a non-finite value"
            )
        return val

    per_param = {}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = evaluate()
            flat[i] = keep - step
            lo = evaluate()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(grad[i]), abs(numeric), 1.0)
            err = max(err, abs(grad[i] - numeric) / denom)
        per_param[name] = err
        worst = max(worst, err)
    return FiniteDifferenceReport(max_rel_error=worst, tolerance=tolerance,
                                  per_param=per_param)
