"""Dense 2-D linear algebra with reverse-mode analytic gradients.

Everything downstream (the toy encoders, the losses, the training loop)
is built from the operations in this file.  Each differentiable op is a
`Node` factory whose backward closure implements the hand-derived
gradient; `grad_check` verifies any composition against central
differences, and stays independent of the analytic path.

Tensors are plain 2-D float64 numpy arrays.  Shape mismatches raise
hard errors rather than broadcasting (only row-wise bias addition is
allowed).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NonFiniteLoss, ShapeMismatch, ZeroRow

CHECKPOINT_MAGIC = b"JEPA"
CHECKPOINT_VERSION = 1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_matrix(x, name="tensor"):
    """Coerce to a 2-D float64 array, enforcing finiteness."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeMismatch(f"{name}: expected 2-D, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ShapeMismatch(f"{name}: non-finite entries")
    return a


# ---------------------------------------------------------------------------
# plain (non-differentiable) reference math, reused inside op forwards
# ---------------------------------------------------------------------------

def l2_normalize_rows(m):
    """Scale every row to unit Euclidean norm.  Raises ZeroRow on rows
    with norm <= 1e-12."""
    a = as_matrix(m, "l2_normalize_rows")
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ZeroRow("row with near-zero norm cannot be normalized")
    return a / norms


def softmax_rows(m):
    """Row-wise softmax with max subtraction for stability."""
    a = as_matrix(m, "softmax_rows")
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# autograd graph
# ---------------------------------------------------------------------------

class Node:
    """One value in the computation graph.

    `bwd(out_grad)` returns per-parent gradient arrays aligned with
    `parents`.  Leaf nodes created from a Parameter carry a `param`
    reference; `backward` adds their accumulated grad into it.
    """

    __slots__ = ("value", "grad", "parents", "bwd", "param")

    def __init__(self, value, parents=(), bwd=None, param=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.param = param

    @property
    def shape(self):
        return self.value.shape


class Parameter:
    """Named trainable tensor.  Gradients accumulate (add into `grad`)
    so a parameter used at several graph sites collects all
    contributions; the optimizer zeroes grads after each step."""

    def __init__(self, name, value):
        self.name = name
        self.value = as_matrix(value, name)
        self.grad = np.zeros_like(self.value)

    def node(self):
        return Node(self.value, param=self)

    def zero_grad(self):
        self.grad[:] = 0.0


def _as_node(x):
    if isinstance(x, Node):
        return x
    return Node(as_matrix(x))


def constant(x):
    return Node(as_matrix(x))


def backward(root):
    """Reverse-mode sweep from a scalar (1x1) root.  Accumulates into
    Parameter.grad for every parameter leaf in the graph."""
    if root.value.shape != (1, 1):
        raise ShapeMismatch("backward root must be a 1x1 scalar")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for n in order:
        n.grad = None
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.param is not None:
            node.param.grad += node.grad
        if node.bwd is None:
            continue
        grads = node.bwd(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return Node(a.value * b.value, (a, b),
                lambda g: (g * b.value, g * a.value))


def scale(a, s):
    a = _as_node(a)
    s = float(s)
    return Node(a.value * s, (a,), lambda g: (g * s,))


def add_bias(a, bias):
    """Row-broadcast bias addition: a is (R,C), bias is (1,C)."""
    a, bias = _as_node(a), _as_node(bias)
    if bias.shape != (1, a.shape[1]):
        raise ShapeMismatch(f"add_bias: {a.shape} vs {bias.shape}")
    return Node(a.value + bias.value, (a, bias),
                lambda g: (g, g.sum(axis=0, keepdims=True)))


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return Node(a.value @ b.value, (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a):
    a = _as_node(a)
    return Node(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(nodes):
    nodes = [_as_node(n) for n in nodes]
    cols = nodes[0].shape[1]
    for n in nodes:
        if n.shape[1] != cols:
            raise ShapeMismatch("concat_rows: column mismatch")
    sizes = [n.shape[0] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(nodes)))

    return Node(np.vstack([n.value for n in nodes]), tuple(nodes), bwd)


def concat_cols(nodes):
    nodes = [_as_node(n) for n in nodes]
    rows = nodes[0].shape[0]
    for n in nodes:
        if n.shape[0] != rows:
            raise ShapeMismatch("concat_cols: row mismatch")
    sizes = [n.shape[1] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(nodes)))

    return Node(np.hstack([n.value for n in nodes]), tuple(nodes), bwd)


def slice_rows(a, lo, hi):
    a = _as_node(a)

    def bwd(g):
        full = np.zeros_like(a.value)
        full[lo:hi] = g
        return (full,)

    return Node(a.value[lo:hi].copy(), (a,), bwd)


def slice_cols(a, lo, hi):
    a = _as_node(a)

    def bwd(g):
        full = np.zeros_like(a.value)
        full[:, lo:hi] = g
        return (full,)

    return Node(a.value[:, lo:hi].copy(), (a,), bwd)


def gather_rows(table, ids):
    """Embedding lookup: rows of `table` selected by integer ids."""
    table = _as_node(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return Node(table.value[ids].copy(), (table,), bwd)


def gelu(a):
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    a = _as_node(a)
    x = a.value
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return Node(x * phi, (a,), lambda g: (g * (phi + x * pdf),))


def softmax(a):
    a = _as_node(a)
    p = softmax_rows(a.value)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return Node(p, (a,), bwd)


def normalize(a):
    """Differentiable row L2 normalization."""
    a = _as_node(a)
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ZeroRow("row with near-zero norm cannot be normalized")
    y = a.value / norms

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return Node(y, (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row layer normalization with learnable gain/bias (both 1xC)."""
    x, gain, bias = _as_node(x), _as_node(gain), _as_node(bias)
    c = x.shape[1]
    if gain.shape != (1, c) or bias.shape != (1, c):
        raise ShapeMismatch("layer_norm: gain/bias shape")
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        dxhat = g * gain.value
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        return (dx, dgain, dbias)

    return Node(xhat * gain.value + bias.value, (x, gain, bias), bwd)


def weighted_mean_rows(x, weights):
    """Weighted mean over rows: weights is a length-R nonnegative vector
    summing to > 0; output is 1xC."""
    x = _as_node(x)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != x.shape[0]:
        raise ShapeMismatch("weighted_mean_rows: weight length")
    total = w.sum()
    if total <= 0:
        raise ShapeMismatch("weighted_mean_rows: zero total weight")
    wn = (w / total)[:, None]
    return Node((wn * x.value).sum(axis=0, keepdims=True), (x,),
                lambda g: (wn * g,))


def sum_all(a):
    a = _as_node(a)
    return Node(np.array([[a.value.sum()]]), (a,),
                lambda g: (np.full_like(a.value, g[0, 0]),))


def cross_entropy_rows(logits, labels, weights=None):
    """Mean softmax cross-entropy over rows.

    `labels` is one integer class per row; `weights` (optional) is a
    per-row nonnegative weight, normalized to sum 1 internally.
    Returns a 1x1 scalar node.
    """
    logits = _as_node(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    r = logits.shape[0]
    if labels.shape[0] != r:
        raise ShapeMismatch("cross_entropy_rows: label count")
    if weights is None:
        w = np.full(r, 1.0 / r)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        total = w.sum()
        if total <= 0:
            raise ShapeMismatch("cross_entropy_rows: zero total weight")
        w = w / total
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(r), labels]
    value = float((w * nll).sum())
    p = softmax_rows(logits.value)

    def bwd(g):
        d = p.copy()
        d[np.arange(r), labels] -= 1.0
        return (g[0, 0] * w[:, None] * d,)

    return Node(np.array([[value]]), (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict = field(default_factory=dict)
    max_rel_err: float = 0.0
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def _rel_err(a, n):
    denom = max(abs(a), abs(n))
    if denom < 1e-6:
        return abs(a - n)
    return abs(a - n) / denom


def grad_check(loss_fn, params, h=1e-5, tol=1e-4, max_entries=None, rng=None):
    """Compare analytic gradients of `loss_fn` against central
    differences (f(x+h) - f(x-h)) / 2h for every parameter entry.

    `loss_fn` takes no arguments, rebuilds the graph from the current
    parameter values and returns the scalar loss node.  When a
    parameter has more entries than `max_entries`, a random subset is
    probed.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError("h must lie in [1e-6, 1e-3]")
    for p in params:
        p.zero_grad()
    root = loss_fn()
    if not np.isfinite(root.value).all():
        raise NonFiniteLoss("loss_fn returned non-finite value")
    backward(root)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(0) if rng is None else rng
    report = GradCheckReport(tol=tol)
    for p in params:
        rows, cols = p.value.shape
        coords = [(i, j) for i in range(rows) for j in range(cols)]
        if max_entries is not None and len(coords) > max_entries:
            idx = rng.choice(len(coords), size=max_entries, replace=False)
            coords = [coords[k] for k in idx]
        worst = 0.0
        for (i, j) in coords:
            orig = p.value[i, j]
            p.value[i, j] = orig + h
            f_plus = float(loss_fn().value[0, 0])
            p.value[i, j] = orig - h
            f_minus = float(loss_fn().value[0, 0])
            p.value[i, j] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteLoss("loss_fn returned non-finite value")
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(analytic[p.name][i, j], numeric))
        report.per_param[p.name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


# ---------------------------------------------------------------------------
# checkpoint tensor payload
# ---------------------------------------------------------------------------

def write_tensors(path, tensors):
    """Serialize named tensors: magic "JEPA", version u32, count u32,
    then per tensor (sorted by name): name u16+utf8, rows u32, cols u32,
    row-major little-endian f32 values."""
    items = sorted(tensors.items())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            a = as_matrix(arr, name)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<II", a.shape[0], a.shape[1]))
            f.write(a.astype("<f4").tobytes(order="C"))


def read_tensors(path):
    """Inverse of write_tensors; values come back as float64."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            rows, cols = struct.unpack("<II", f.read(8))
            raw = f.read(rows * cols * 4)
            a = np.frombuffer(raw, dtype="<f4").reshape(rows, cols)
            out[name] = a.astype(np.float64)
        return out
