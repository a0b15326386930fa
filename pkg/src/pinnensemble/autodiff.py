"""Derivative machinery.

Two layers live here:

* A small scalar reverse-mode tape (:class:`Tape`, :class:`Node`) and a
  forward-mode dual number (:class:`Dual`).  They are used for scalar
  programs and serve as an independent reference for the vectorised path.
* The vectorised network path used in training.  Input derivatives of an
  MLP (up to second order) are propagated layer by layer in Taylor form and
  parameter gradients are taken by JAX reverse mode through that
  propagation, so a loss built from ``u_xx`` is differentiated exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .errors import ContractViolation, UnsupportedOpError, UnsupportedOrderError


# ---------------------------------------------------------------------------
# Scalar reverse-mode tape
# ---------------------------------------------------------------------------

def _affine_value(vals):
    n = (len(vals) - 1) // 2
    return math.fsum(vals[i] * vals[n + i] for i in range(n)) + vals[-1]


def _affine_partials(vals, out):
    n = (len(vals) - 1) // 2
    return [vals[n + i] for i in range(n)] + [vals[i] for i in range(n)] + [1.0]


# op-kind -> (arity or None for variadic, value rule, local partials rule)
_OPS = {
    "add": (2, lambda a: a[0] + a[1], lambda a, y: [1.0, 1.0]),
    "sub": (2, lambda a: a[0] - a[1], lambda a, y: [1.0, -1.0]),
    "mul": (2, lambda a: a[0] * a[1], lambda a, y: [a[1], a[0]]),
    "div": (2, lambda a: a[0] / a[1], lambda a, y: [1.0 / a[1], -a[0] / (a[1] * a[1])]),
    "neg": (1, lambda a: -a[0], lambda a, y: [-1.0]),
    "square": (1, lambda a: a[0] * a[0], lambda a, y: [2.0 * a[0]]),
    "tanh": (1, lambda a: math.tanh(a[0]), lambda a, y: [1.0 - y * y]),
    "exp": (1, lambda a: math.exp(a[0]), lambda a, y: [y]),
    "log": (1, lambda a: math.log(a[0]), lambda a, y: [1.0 / a[0]]),
    "sin": (1, lambda a: math.sin(a[0]), lambda a, y: [math.cos(a[0])]),
    "affine": (None, _affine_value, _affine_partials),
}

SUPPORTED_OPS = frozenset(_OPS) | {"leaf", "const"}


class Tape:
    """Append-only record of a scalar computation.

    Nodes are appended in evaluation order, so the record is topologically
    sorted by construction.  :meth:`reset` clears the record in place so one
    tape can be reused across many evaluations.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.operands: list[tuple[int, ...]] = []
        self.values: list[float] = []

    def __len__(self):
        return len(self.values)

    def reset(self):
        self.kinds.clear()
        self.operands.clear()
        self.values.clear()

    def _push(self, kind, operands, value):
        self.kinds.append(kind)
        self.operands.append(operands)
        self.values.append(value)
        return Node(self, len(self.values) - 1)

    def leaf(self, value):
        return self._push("leaf", (), float(value))

    def const(self, value):
        return self._push("const", (), float(value))

    def apply(self, kind, *args):
        if kind not in _OPS:
            raise UnsupportedOpError(f"unsupported op-kind {kind!r}")
        arity, rule, _ = _OPS[kind]
        if arity is not None and len(args) != arity:
            raise UnsupportedOpError(f"{kind!r} takes {arity} operands, got {len(args)}")
        nodes = [self._lift(a) for a in args]
        idx = tuple(n.index for n in nodes)
        return self._push(kind, idx, rule([self.values[i] for i in idx]))

    def _lift(self, a):
        if isinstance(a, Node):
            if a.tape is not self:
                raise ContractViolation("operand recorded on a different tape")
            return a
        if isinstance(a, (int, float, np.floating, np.integer)):
            return self.const(a)
        raise UnsupportedOpError(f"cannot record operand of type {type(a).__name__}")

    def replay(self, leaves: Sequence[float]) -> list[float]:
        """Re-evaluate the record with new leaf values (in leaf order)."""
        it = iter(leaves)
        out = [0.0] * len(self.values)
        for i, kind in enumerate(self.kinds):
            if kind == "leaf":
                out[i] = float(next(it))
            elif kind == "const":
                out[i] = self.values[i]
            else:
                out[i] = _OPS[kind][1]([out[j] for j in self.operands[i]])
        return out

    def backward(self, root: int) -> list[float]:
        """Adjoints of ``root`` with respect to every recorded node."""
        adj = [0.0] * (root + 1)
        adj[root] = 1.0
        for i in range(root, -1, -1):
            kind = self.kinds[i]
            if kind in ("leaf", "const") or adj[i] == 0.0:
                continue
            ops = self.operands[i]
            partials = _OPS[kind][2]([self.values[j] for j in ops], self.values[i])
            for j, p in zip(ops, partials):
                adj[j] += adj[i] * p
        return adj


class Node:
    """Handle to one entry of a :class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def kind(self):
        return self.tape.kinds[self.index]

    def __add__(self, o):
        return self.tape.apply("add", self, o)

    def __radd__(self, o):
        return self.tape.apply("add", o, self)

    def __sub__(self, o):
        return self.tape.apply("sub", self, o)

    def __rsub__(self, o):
        return self.tape.apply("sub", o, self)

    def __mul__(self, o):
        return self.tape.apply("mul", self, o)

    def __rmul__(self, o):
        return self.tape.apply("mul", o, self)

    def __truediv__(self, o):
        return self.tape.apply("div", self, o)

    def __rtruediv__(self, o):
        return self.tape.apply("div", o, self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __pow__(self, k):
        if k == 2:
            return self.tape.apply("square", self)
        raise UnsupportedOpError(f"power {k!r} is not a supported op-kind")

    def __abs__(self):
        raise UnsupportedOpError("abs is not a supported op-kind")

    def __repr__(self):
        return f"Node({self.kind}, value={self.value!r})"


@dataclass
class Graph:
    """Recorded scalar program: the tape, its leaves and its root."""

    tape: Tape
    leaves: tuple[int, ...]
    root: int

    @property
    def value(self):
        return self.tape.values[self.root]

    def replay(self, leaves: Sequence[float]) -> float:
        return self.tape.replay(leaves)[self.root]

    def gradient(self) -> np.ndarray:
        adj = self.tape.backward(self.root)
        return np.array([adj[i] for i in self.leaves])


@dataclass(frozen=True)
class Dual:
    """Forward-mode value ``primal + tangent * eps`` with ``eps**2 = 0``."""

    primal: float
    tangent: float = 0.0

    @staticmethod
    def _lift(o):
        return o if isinstance(o, Dual) else Dual(float(o), 0.0)

    def __add__(self, o):
        o = self._lift(o)
        return Dual(self.primal + o.primal, self.tangent + o.tangent)

    __radd__ = __add__

    def __sub__(self, o):
        o = self._lift(o)
        return Dual(self.primal - o.primal, self.tangent - o.tangent)

    def __rsub__(self, o):
        return self._lift(o) - self

    def __mul__(self, o):
        o = self._lift(o)
        return Dual(self.primal * o.primal, self.tangent * o.primal + self.primal * o.tangent)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = self._lift(o)
        q = self.primal / o.primal
        return Dual(q, (self.tangent - q * o.tangent) / o.primal)

    def __rtruediv__(self, o):
        return self._lift(o) / self

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __pow__(self, k):
        if k == 2:
            return Dual(self.primal * self.primal, 2.0 * self.primal * self.tangent)
        raise UnsupportedOpError(f"power {k!r} is not a supported op-kind")


def _unary(kind, fn, dfn):
    def op(x):
        if isinstance(x, Node):
            return x.tape.apply(kind, x)
        if isinstance(x, Dual):
            y = fn(x.primal)
            return Dual(y, dfn(x.primal, y) * x.tangent)
        return fn(x)

    op.__name__ = kind
    return op


tanh = _unary("tanh", math.tanh, lambda x, y: 1.0 - y * y)
exp = _unary("exp", math.exp, lambda x, y: y)
log = _unary("log", math.log, lambda x, y: 1.0 / x)
sin = _unary("sin", math.sin, lambda x, y: math.cos(x))


def affine(xs, ws, b):
    """``sum(w*x) + b`` recorded as one node when the operands are on a tape."""
    if len(xs) != len(ws):
        raise ContractViolation("affine: mismatched operand lengths")
    for v in (*xs, *ws, b):
        if isinstance(v, Node):
            return v.tape.apply("affine", *xs, *ws, b)
    acc = b
    for x, w in zip(xs, ws):
        acc = acc + w * x
    return acc


def record_and_evaluate(program: Callable, leaves: Iterable[float], tape: Tape | None = None):
    """Run ``program(*leaf_nodes)`` on a tape.

    Returns ``(value, graph)``.  Passing an existing ``tape`` reuses its
    storage (it is reset first).
    """
    tape = Tape() if tape is None else tape
    tape.reset()
    nodes = [tape.leaf(v) for v in leaves]
    out = program(*nodes)
    if not isinstance(out, Node):
        out = tape.const(out)
    return out.value, Graph(tape, tuple(n.index for n in nodes), out.index)


def directional_derivative(program: Callable, leaves: Sequence[float], direction: Sequence[float]) -> float:
    """Forward-mode derivative of ``program`` along ``direction``."""
    out = program(*[Dual(float(v), float(d)) for v, d in zip(leaves, direction)])
    return out.tangent if isinstance(out, Dual) else 0.0


# ---------------------------------------------------------------------------
# Vectorised network derivatives (JAX)
# ---------------------------------------------------------------------------

@jax.custom_jvp
def fast_tanh(z):
    """tanh with an exp-based primal; XLA's f64 tanh is several times slower."""
    e = jnp.exp(-2.0 * jnp.abs(z))
    return jnp.sign(z) * (1.0 - e) / (1.0 + e)


@fast_tanh.defjvp
def _fast_tanh_jvp(primals, tangents):
    (z,), (dz,) = primals, tangents
    y = fast_tanh(z)
    return y, (1.0 - y * y) * dz


def _normalise_request(orders):
    first, second = set(), set()
    for o in orders:
        o = tuple(int(i) for i in o)
        if len(o) > 2:
            raise UnsupportedOrderError(f"derivative order {len(o)} requested; at most 2 supported")
        if len(o) == 1:
            first.add(o)
        elif len(o) == 2:
            second.add(tuple(sorted(o)))
            first.update({(o[0],), (o[1],)})
    return sorted(first), sorted(second)


def taylor_forward(params, X, orders=(), masks=None):
    """Network output and its input derivatives at a batch of points.

    Parameters
    ----------
    params : NetworkParams
    X : array (N, d)
    orders : iterable of tuples
        ``(i,)`` for d/dx_i and ``(i, j)`` for d2/dx_i dx_j.
    masks : sequence of arrays, optional
        Dropout multipliers, one ``(N, width)`` array per hidden layer.

    Returns
    -------
    dict mapping ``()`` and each requested tuple to an ``(N, out)`` array.
    """
    first, second = _normalise_request(orders)
    arch = params.arch
    X = jnp.asarray(X)
    N = X.shape[0]
    lo, scale = arch.input_shift_scale()
    h = (X - lo) * scale - 1.0 if scale is not None else X

    W, b = params.weights[0], params.biases[0]
    z = h @ W.T + b
    # first layer: input derivative seeds are constant columns of W
    col = {f: W[:, f[0]] * (scale[f[0]] if scale is not None else 1.0) for f in first}
    a = fast_tanh(z)
    s = 1.0 - a * a
    ch = {(): a}
    for f in first:
        ch[f] = s * col[f]
    for p in second:
        ch[p] = -2.0 * a * s * col[(p[0],)] * col[(p[1],)]
    if masks is not None:
        ch = {k: v * masks[0] for k, v in ch.items()}

    keys = [()] + first + second
    for layer in range(1, len(params.weights)):
        W, b = params.weights[layer], params.biases[layer]
        stacked = jnp.concatenate([ch[k] for k in keys], axis=0) @ W.T
        zc = {k: stacked[i * N:(i + 1) * N] for i, k in enumerate(keys)}
        zc[()] = zc[()] + b
        if layer == len(params.weights) - 1:
            return arch.apply_output_transform(zc, first, second)
        a = fast_tanh(zc[()])
        s = 1.0 - a * a
        ch = {(): a}
        for f in first:
            ch[f] = s * zc[f]
        for p in second:
            ch[p] = s * zc[p] - 2.0 * a * s * zc[(p[0],)] * zc[(p[1],)]
        if masks is not None:
            ch = {k: v * masks[layer] for k, v in ch.items()}
    # single-layer network (no hidden layer) is rejected by MlpArchitecture
    raise ContractViolation("network has no output layer")


def input_derivatives(params, x, orders):
    """Input derivatives of a scalar-output network.

    ``x`` is one point ``(d,)`` or a batch ``(N, d)``.  Each returned value is
    a JAX array and stays differentiable with respect to ``params``.
    """
    x = jnp.asarray(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.arch.input_dim:
        raise ContractViolation(f"input dimension {X.shape[1]} != {params.arch.input_dim}")
    out = taylor_forward(params, X, orders)
    keys = [tuple(int(i) for i in o) for o in orders]
    res = {}
    for k in keys:
        v = out[tuple(sorted(k)) if len(k) == 2 else k][:, 0]
        res[k] = v[0] if single else v
    return res


def hessian_reference(params, x):
    """Forward-over-reverse Hessian of the scalar output at one point."""
    from .network import forward

    f = lambda p: forward(params, p)[0]
    return jax.jacfwd(jax.grad(f))(jnp.asarray(x))


def grad_params(loss, params):
    """Gradient of a scalar loss with respect to parameters, as a flat vector.

    ``loss`` is either a :class:`Graph` recorded with the parameters as its
    leaves, or a callable ``loss(params) -> scalar`` over a JAX pytree.
    """
    if isinstance(loss, Graph):
        return loss.gradient()
    value = loss(params)
    if jnp.ndim(value) != 0:
        raise ContractViolation(f"loss must be scalar, got shape {jnp.shape(value)}")
    g = jax.grad(loss)(params)
    return np.asarray(ravel_pytree(g)[0])
