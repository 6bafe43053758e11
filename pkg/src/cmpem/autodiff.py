"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The op vocabulary is fixed to exactly what the embedding and composition
networks need, and every op enforces exact input shapes (no broadcasting),
which keeps the backward rules short enough to audit by hand.  Nodes carry
a creation index; ``backward`` visits the subgraph reachable from the loss
once, in reverse creation order, so parents are always finished after all
of their consumers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12


class ShapeMismatchError(ValueError):
    """An op received inputs whose shapes it does not accept."""


class DegenerateNormalizationError(ValueError):
    """l2_normalize received a vector with norm below NORM_EPS."""


_creation_counter = itertools.count()


class Tensor:
    """Dense float64 array with optional participation in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_order")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._order = next(_creation_counter)

    @property
    def shape(self):
        return self.data.shape

    def in_graph(self):
        return self.requires_grad or self._vjp is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _record(data, parents, vjp):
    out = Tensor(data)
    if any(p.in_graph() for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _require_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"{op}: operands must share a shape, got {a.data.shape} and {b.data.shape}")


def _require_vector(op, t):
    if t.data.ndim != 1:
        raise ShapeMismatchError(f"{op}: expected a vector, got shape {t.data.shape}")


def _require_scalar(op, t):
    if t.data.shape != ():
        raise ShapeMismatchError(f"{op}: expected a scalar, got shape {t.data.shape}")


def matmul(a, b):
    """Matrix @ vector or matrix @ matrix; no implicit promotion."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 1:
        def vjp(g):
            return np.outer(g, bd), ad.T @ g
    else:
        def vjp(g):
            return g @ bd.T, ad.T @ g
    return _record(ad @ bd, (a, b), vjp)


def add(a, b):
    _require_same_shape("add", a, b)

    def vjp(g):
        return g, g

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b):
    _require_same_shape("sub", a, b)

    def vjp(g):
        return g, -g

    return _record(a.data - b.data, (a, b), vjp)


def elementwise_mul(a, b):
    _require_same_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _record(ad * bd, (a, b), vjp)


def relu(x):
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), vjp)


def tanh(x):
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record(out, (x,), vjp)


def l2_normalize(v):
    """Scale a vector to unit Euclidean norm; degenerate inputs are an error."""
    _require_vector("l2_normalize", v)
    n = float(np.linalg.norm(v.data))
    if n < NORM_EPS:
        raise DegenerateNormalizationError(f"degenerate normalization: input norm {n:.3e} is below {NORM_EPS:.0e}")
    z = v.data / n

    def vjp(g):
        # Full Jacobian of v/|v|: (I - z z^T) / |v|.
        return ((g - z * float(z @ g)) / n,)

    return _record(z, (v,), vjp)


def squared_euclidean(a, b):
    _require_vector("squared_euclidean", a)
    _require_same_shape("squared_euclidean", a, b)
    d = a.data - b.data

    def vjp(g):
        s = 2.0 * float(g)
        return s * d, -s * d

    return _record(np.asarray(d @ d), (a, b), vjp)


def scalar_max0(x):
    """Hinge: max(0, x) on a scalar; subgradient at 0 is 0."""
    _require_scalar("scalar_max0", x)
    active = bool(x.data > 0)

    def vjp(g):
        return (g if active else np.zeros(()),)

    return _record(np.asarray(x.data if active else 0.0), (x,), vjp)


def mean(x):
    size = x.data.size
    if size == 0:
        raise ShapeMismatchError("mean: input has no elements")

    def vjp(g):
        return (np.full(x.data.shape, float(g) / size),)

    return _record(np.asarray(np.mean(x.data)), (x,), vjp)


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": elementwise_mul,
    "relu": relu,
    "tanh": tanh,
    "l2_normalize": l2_normalize,
    "squared_euclidean": squared_euclidean,
    "scalar_max0": scalar_max0,
    "mean": mean,
}


def op_apply(kind, *inputs):
    if kind not in OPS:
        raise KeyError(f"unknown op kind: {kind}")
    return OPS[kind](*inputs)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad ancestor.

    Calling backward twice without resetting grads adds the gradients again;
    that is intended accumulation behavior, not an error.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    if not loss.in_graph():
        raise ValueError("backward: loss is not connected to a recorded graph")
    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if id(p) not in seen and p.in_graph():
                seen.add(id(p))
                stack.append(p)
    # Parents are created before their consumers, so reverse creation order
    # guarantees a node's gradient is complete before its vjp runs.
    nodes.sort(key=lambda t: t._order, reverse=True)
    flowing = {id(loss): np.ones(())}
    for t in nodes:
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        if t._vjp is None:
            continue
        for p, c in zip(t._parents, t._vjp(g)):
            if c is None or not p.in_graph():
                continue
            prev = flowing.get(id(p))
            if prev is None:
                flowing[id(p)] = np.array(c, dtype=np.float64)
            else:
                prev += c


# --- finite-difference gradient checking -----------------------------------

@dataclass
class OpCheck:
    op: str
    max_rel_error: float
    passed: bool


def _relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _analytic_grads(build, arrays):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(tensors))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def _numeric_grads(build, arrays, h):
    grads = []
    work = [np.array(a) for a in arrays]
    for i, a in enumerate(work):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = float(build([Tensor(w) for w in work]).data)
            flat[j] = orig - h
            lo = float(build([Tensor(w) for w in work]).data)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build, arrays, h=1e-5):
    """Max relative error between backward() and central finite differences."""
    analytic = _analytic_grads(build, arrays)
    numeric = _numeric_grads(build, arrays, h)
    return max(_relative_error(a, n) for a, n in zip(analytic, numeric))


def _op_cases(rng):
    a34 = rng.standard_normal((3, 4))
    v4 = rng.standard_normal(4)
    b42 = rng.standard_normal((4, 2))
    v5 = rng.standard_normal(5)
    w5 = rng.standard_normal(5)
    # Keep relu and hinge inputs away from their kinks.
    r5 = rng.uniform(0.05, 1.0, 5) * rng.choice([-1.0, 1.0], 5)
    nv = rng.standard_normal(6) * 0.7 + 0.3
    return [
        ("matmul", lambda t: mean(matmul(t[0], t[1])), [a34, v4]),
        ("matmul", lambda t: mean(matmul(t[0], t[1])), [a34, b42]),
        ("add", lambda t: mean(add(t[0], t[1])), [v5, w5]),
        ("sub", lambda t: mean(sub(t[0], t[1])), [v5, w5]),
        ("elementwise_mul", lambda t: mean(elementwise_mul(t[0], t[1])), [v5, w5]),
        ("relu", lambda t: mean(relu(t[0])), [r5]),
        ("tanh", lambda t: mean(tanh(t[0])), [v5]),
        ("l2_normalize", lambda t: squared_euclidean(l2_normalize(t[0]), t[1]), [nv, rng.standard_normal(6)]),
        ("squared_euclidean", lambda t: squared_euclidean(t[0], t[1]), [v5, w5]),
        ("scalar_max0", lambda t: scalar_max0(t[0]), [np.asarray(0.7)]),
        ("scalar_max0", lambda t: scalar_max0(t[0]), [np.asarray(-0.7)]),
        ("mean", lambda t: mean(t[0]), [a34]),
    ]


def run_gradcheck(seed=0, h=1e-5, tolerance=1e-4, corrupt_op=None):
    """Finite-difference check of every op's backward rule.

    Returns one OpCheck per op kind.  ``corrupt_op`` is a self-test hook: it
    perturbs that op's analytic gradients before comparison so callers can
    confirm the checker actually fails on a wrong backward rule.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for op, build, arrays in _op_cases(rng):
        analytic = _analytic_grads(build, arrays)
        if corrupt_op == op:
            analytic = [a + 10.0 * tolerance * (1.0 + np.abs(a)) for a in analytic]
        numeric = _numeric_grads(build, arrays, h)
        err = max(_relative_error(a, n) for a, n in zip(analytic, numeric))
        worst[op] = max(worst.get(op, 0.0), err)
    return [OpCheck(op, err, err < tolerance) for op, err in worst.items()]


def gradient_check_network(seed=0, h=1e-5):
    """Finite-difference check of a small randomized network using every op.

    Builds a two-layer embedding net, the pairwise composition, a normalized
    distance, a hinge, and a relu side branch (69 parameters total), then
    compares backward() against central differences on every parameter.
    Inputs are resampled until all hinge and relu arguments sit safely away
    from their kinks.
    """
    rng = np.random.default_rng(seed)
    n, hdim, m = 4, 6, 3
    for _ in range(50):
        arrays = [
            rng.standard_normal((hdim, n)) * 0.6,
            rng.standard_normal(hdim) * 0.1,
            rng.standard_normal((m, hdim)) * 0.6,
            rng.standard_normal(m) * 0.1,
            np.eye(m) + 0.1 * rng.standard_normal((m, m)),
            0.1 * rng.standard_normal((m, m)),
        ]
        x1, x2, x3 = (rng.standard_normal(n) for _ in range(3))
        margin = np.asarray(0.1)

        def build(t, x1=x1, x2=x2, x3=x3, margin=margin):
            def emb(x):
                hid = tanh(add(matmul(t[0], Tensor(x)), t[1]))
                return add(matmul(t[2], hid), t[3])

            e1, e2, e3 = emb(x1), emb(x2), emb(x3)
            comp = l2_normalize(add(add(matmul(t[4], e1), matmul(t[4], e2)), matmul(t[5], elementwise_mul(e1, e2))))
            d_pos = squared_euclidean(comp, l2_normalize(e3))
            d_neg = squared_euclidean(e1, e2)
            hinge = scalar_max0(add(sub(d_pos, d_neg), Tensor(margin)))
            side = mean(relu(sub(e1, e2)))
            return add(hinge, side)

        hinge_arg, relu_args = _network_kink_args(arrays, x1, x2, x3, float(margin))
        if abs(hinge_arg) > 1e-3 and np.min(np.abs(relu_args)) > 1e-3:
            return check_gradients(build, arrays, h=h)
    raise RuntimeError("could not find kink-safe inputs for the network gradient check")


def _network_forward(arrays, x):
    hid = np.tanh(arrays[0] @ x + arrays[1])
    return arrays[2] @ hid + arrays[3]


def _network_kink_args(arrays, x1, x2, x3, margin):
    e1 = _network_forward(arrays, x1)
    e2 = _network_forward(arrays, x2)
    e3 = _network_forward(arrays, x3)
    raw = arrays[4] @ e1 + arrays[4] @ e2 + arrays[5] @ (e1 * e2)
    comp = raw / np.linalg.norm(raw)
    z3 = e3 / np.linalg.norm(e3)
    d_pos = float(np.sum((comp - z3) ** 2))
    d_neg = float(np.sum((e1 - e2) ** 2))
    return d_pos - d_neg + margin, e1 - e2
