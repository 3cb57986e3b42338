"""
Differentiation substrate for the density-shaping solver.

Two cooperating pieces:

- ``Tape`` / ``Var``: reverse mode. Every primitive applied to a ``Var`` is
  appended to its tape together with its operands; ``Tape.backward`` sweeps the
  nodes in reverse recording order (a valid reverse topological order) and
  accumulates adjoints.
- ``Dual``: forward mode with a fixed number of tangent directions. The value
  and the tangents may themselves be ``Var`` objects, so a dual-valued forward
  pass recorded on a tape yields parameter gradients of quantities that contain
  input derivatives (forward-over-reverse).

Both types plug into numpy through ``__array_ufunc__``; code written against
``np.tanh``, ``np.exp``, ``np.sqrt``, ``scipy.special.erf`` and ``@`` runs
unchanged on plain arrays, traced values and duals. Anything outside the
primitive set raises ``UnsupportedPrimitiveError`` as soon as it is applied.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class UnsupportedPrimitiveError(TypeError):
    """A function outside the primitive set was applied to a traced value."""


class EvaluationError(FloatingPointError):
    """A NaN appeared while recording a forward pass."""


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the shape of the operand it belongs to."""
    grad = np.asarray(grad)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass(frozen=True)
class Primitive:
    """A recordable operation: forward map plus vector-Jacobian product.

    ``vjp(adjoint, out, *operand_values, **params)`` returns one adjoint per
    operand (``None`` where no gradient flows).
    """

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]]


def _matmul_vjp(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = g2 @ np.swapaxes(b2, -1, -2)
    gb = np.swapaxes(a2, -1, -2) @ g2
    if a.ndim == 1:
        ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
    if b.ndim == 1:
        gb = gb.reshape(gb.shape[:-1])
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def _getitem_vjp(g, out, a, index=None):
    grad = np.zeros(a.shape, dtype=np.result_type(a, g))
    if _is_basic_index(index):
        grad[index] = g
    else:
        np.add.at(grad, index, g)
    return (grad,)


def _stack_vjp(g, out, *arrays, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))


def _clip_mask(a, lo, hi):
    return (a > lo) & (a < hi)


ADD = Primitive("add", np.add, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
SUB = Primitive("sub", np.subtract, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
MUL = Primitive("mul", np.multiply, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
DIV = Primitive(
    "div",
    np.true_divide,
    lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
)
NEG = Primitive("neg", np.negative, lambda g, out, a: (-g,))
POWER = Primitive(
    "power",
    lambda a, exponent=1.0: np.power(a, exponent),
    lambda g, out, a, exponent=1.0: (g * exponent * np.power(a, exponent - 1.0),),
)
TANH = Primitive("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
EXP = Primitive("exp", np.exp, lambda g, out, a: (g * out,))
SQRT = Primitive("sqrt", np.sqrt, lambda g, out, a: (g * 0.5 / out,))
ERF = Primitive("erf", special.erf, lambda g, out, a: (g * _TWO_OVER_SQRT_PI * np.exp(-a * a),))
MATMUL = Primitive("matmul", np.matmul, _matmul_vjp)
SUM = Primitive("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)
RESHAPE = Primitive(
    "reshape",
    lambda a, shape=None: np.reshape(a, shape),
    lambda g, out, a, shape=None: (np.reshape(g, a.shape),),
)
TRANSPOSE = Primitive(
    "transpose",
    lambda a, axes=None: np.transpose(a, axes),
    lambda g, out, a, axes=None: (np.transpose(g, None if axes is None else np.argsort(axes)),),
)
GETITEM = Primitive("getitem", lambda a, index=None: a[index], _getitem_vjp)
STACK = Primitive("stack", lambda *arrays, axis=0: np.stack(arrays, axis=axis), _stack_vjp)
CLIP = Primitive(
    "clip",
    lambda a, lo=-np.inf, hi=np.inf: np.clip(a, lo, hi),
    lambda g, out, a, lo=-np.inf, hi=np.inf: (g * _clip_mask(a, lo, hi),),
)

_UFUNCS: Dict[Any, Primitive] = {
    np.add: ADD,
    np.subtract: SUB,
    np.multiply: MUL,
    np.true_divide: DIV,
    np.negative: NEG,
    np.tanh: TANH,
    np.exp: EXP,
    np.sqrt: SQRT,
    special.erf: ERF,
    np.matmul: MATMUL,
}


@dataclass
class Node:
    """One recorded operation. Operands are tape slots (int) or constant arrays."""

    primitive: Optional[Primitive]
    operands: Tuple[Union[int, np.ndarray], ...]
    params: Dict[str, Any]
    value: np.ndarray


@dataclass
class Tape:
    """Ordered record of primitive applications with input and output slots."""

    nodes: List[Node] = field(default_factory=list)
    inputs: List[int] = field(default_factory=list)
    output: Optional[int] = None

    def variable(self, value) -> "Var":
        """Register an input slot holding ``value``."""
        value = np.array(value, dtype=float)
        self.nodes.append(Node(None, (), {}, value))
        index = len(self.nodes) - 1
        self.inputs.append(index)
        return Var(self, index)

    def record(self, primitive: Primitive, args: Sequence[Any], params: Dict[str, Any]) -> "Var":
        operands = []
        values = []
        for arg in args:
            if isinstance(arg, Var):
                if arg.tape is not self:
                    raise ValueError("operands recorded on different tapes cannot be combined")
                operands.append(arg.index)
                values.append(arg.value)
            else:
                const = np.asarray(arg, dtype=float)
                operands.append(const)
                values.append(const)
        with np.errstate(all="ignore"):
            value = np.asarray(primitive.forward(*values, **params))
        index = len(self.nodes)
        if value.dtype.kind == "f" and np.isnan(value).any():
            raise EvaluationError(f"NaN produced at node {index} ({primitive.name})")
        self.nodes.append(Node(primitive, tuple(operands), dict(params), value))
        return Var(self, index)

    def _operand_values(self, node: Node, values: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [values[op] if isinstance(op, int) else op for op in node.operands]

    def replay(self, inputs: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
        """Re-run the recorded forward pass, optionally on new input values.

        Returns the value of the output slot (or of the last node when no
        output was marked).
        """
        values: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        fresh = dict(zip(self.inputs, inputs)) if inputs is not None else {}
        for i, node in enumerate(self.nodes):
            if node.primitive is None:
                values[i] = np.array(fresh.get(i, node.value), dtype=float)
                continue
            with np.errstate(all="ignore"):
                values[i] = np.asarray(node.primitive.forward(*self._operand_values(node, values), **node.params))
        target = self.output if self.output is not None else len(self.nodes) - 1
        return values[target]

    def backward(self, output: "Var") -> List[Optional[np.ndarray]]:
        """Reverse sweep from a scalar output; returns one adjoint per slot."""
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
        self.output = output.index
        adjoints: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        adjoints[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = adjoints[i]
            node = self.nodes[i]
            if g is None or node.primitive is None:
                continue
            operand_values = [self.nodes[op].value if isinstance(op, int) else op for op in node.operands]
            grads = node.primitive.vjp(g, node.value, *operand_values, **node.params)
            for op, og in zip(node.operands, grads):
                if not isinstance(op, int) or og is None:
                    continue
                adjoints[op] = og if adjoints[op] is None else adjoints[op] + og
            if i not in self.inputs:
                adjoints[i] = None
        return adjoints

    def gradient(self, output: "Var", wrt: "Var") -> np.ndarray:
        adjoint = self.backward(output)[wrt.index]
        if adjoint is None:
            return np.zeros_like(wrt.value)
        return np.array(adjoint, dtype=float).reshape(wrt.value.shape)


def _is_dual(x) -> bool:
    return isinstance(x, Dual)


def apply(primitive: Primitive, *args, **params):
    """Apply a primitive, recording it when any operand is traced."""
    tape = next((a.tape for a in args if isinstance(a, Var)), None)
    if tape is None:
        return primitive.forward(*[np.asarray(a) for a in args], **params)
    return tape.record(primitive, args, params)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Var":
        return self.transpose()

    def __repr__(self) -> str:
        return f"Var(node={self.index}, shape={self.shape})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if any(_is_dual(x) for x in inputs):
            return NotImplemented
        if method != "__call__" or kwargs:
            raise UnsupportedPrimitiveError(f"{ufunc.__name__}.{method} is not a supported primitive")
        if ufunc is np.square:
            return apply(POWER, inputs[0], exponent=2.0)
        if ufunc is np.power:
            base, exponent = inputs
            if isinstance(exponent, Var):
                raise UnsupportedPrimitiveError("power with a traced exponent is not supported")
            return apply(POWER, base, exponent=float(exponent))
        primitive = _UFUNCS.get(ufunc)
        if primitive is None:
            raise UnsupportedPrimitiveError(f"{ufunc.__name__} is not a supported primitive")
        return apply(primitive, *inputs)

    def _binary(self, primitive, other, reverse=False):
        if _is_dual(other):
            return NotImplemented
        return apply(primitive, other, self) if reverse else apply(primitive, self, other)

    def __add__(self, other):
        return self._binary(ADD, other)

    def __radd__(self, other):
        return self._binary(ADD, other, reverse=True)

    def __sub__(self, other):
        return self._binary(SUB, other)

    def __rsub__(self, other):
        return self._binary(SUB, other, reverse=True)

    def __mul__(self, other):
        return self._binary(MUL, other)

    def __rmul__(self, other):
        return self._binary(MUL, other, reverse=True)

    def __truediv__(self, other):
        return self._binary(DIV, other)

    def __rtruediv__(self, other):
        return self._binary(DIV, other, reverse=True)

    def __matmul__(self, other):
        return self._binary(MATMUL, other)

    def __rmatmul__(self, other):
        return self._binary(MATMUL, other, reverse=True)

    def __neg__(self):
        return apply(NEG, self)

    def __pow__(self, exponent):
        if isinstance(exponent, (Var, Dual)):
            raise UnsupportedPrimitiveError("power with a traced exponent is not supported")
        return apply(POWER, self, exponent=float(exponent))

    def __getitem__(self, index):
        return apply(GETITEM, self, index=index)

    def sum(self, axis=None, keepdims=False):
        return apply(SUM, self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply(RESHAPE, self, shape=shape)

    def transpose(self, axes=None):
        return apply(TRANSPOSE, self, axes=axes)

    def clip(self, lo, hi):
        return apply(CLIP, self, lo=lo, hi=hi)


def value_of(x) -> np.ndarray:
    """Plain numpy value of an array, ``Var`` or ``Dual`` (primal part)."""
    if isinstance(x, Dual):
        return value_of(x.value)
    if isinstance(x, Var):
        return x.value
    return np.asarray(x)


class Dual:
    """Forward-mode value with a fixed-width tuple of tangent directions.

    ``value`` and each tangent may be plain arrays or tape ``Var`` objects.
    """

    __slots__ = ("value", "tangents")
    __array_priority__ = 200

    def __init__(self, value, tangents: Sequence[Any]):
        self.value = value
        self.tangents = tuple(tangents)

    @classmethod
    def seed(cls, value, directions: Sequence[Any]) -> "Dual":
        return cls(value, tuple(directions))

    @property
    def shape(self) -> Tuple[int, ...]:
        return value_of(self.value).shape

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def T(self) -> "Dual":
        return self.transpose()

    def __repr__(self) -> str:
        return f"Dual(shape={self.shape}, directions={len(self.tangents)})"

    @staticmethod
    def _parts(x):
        if isinstance(x, Dual):
            return x.value, x.tangents
        return x, None

    def _combine(self, other, value, rule):
        """Build a dual from the primal result and a per-direction tangent rule."""
        ta = self.tangents
        tb = Dual._parts(other)[1]
        if tb is not None and len(ta) != len(tb):
            raise ValueError("duals with different tangent widths cannot be combined")
        tangents = [rule(ta[k], tb[k] if tb is not None else None) for k in range(len(ta))]
        return Dual(value, tangents)

    def __add__(self, other):
        a, b = self.value, Dual._parts(other)[0]
        return self._combine(other, a + b, lambda ta, tb: _plus(ta, tb))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        a, b = self.value, Dual._parts(other)[0]
        return self._combine(other, a - b, lambda ta, tb: _plus(ta, None if tb is None else -tb))

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        a, b = self.value, Dual._parts(other)[0]
        return self._combine(
            other, a * b, lambda ta, tb: _plus(None if ta is None else ta * b, None if tb is None else a * tb)
        )

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        a, b = self.value, Dual._parts(other)[0]
        out = a / b
        return self._combine(
            other, out, lambda ta, tb: _plus(None if ta is None else ta / b, None if tb is None else -(out * tb) / b)
        )

    def __rtruediv__(self, other):
        b = self.value
        out = other / b
        return Dual(out, [-(out * t) / b for t in self.tangents])

    def __matmul__(self, other):
        a, b = self.value, Dual._parts(other)[0]
        return self._combine(
            other, a @ b, lambda ta, tb: _plus(None if ta is None else ta @ b, None if tb is None else a @ tb)
        )

    def __rmatmul__(self, other):
        b = self.value
        return Dual(other @ b, [other @ t for t in self.tangents])

    def __neg__(self):
        return Dual(-self.value, [-t for t in self.tangents])

    def __pow__(self, exponent):
        if isinstance(exponent, (Var, Dual)):
            raise UnsupportedPrimitiveError("power with a traced exponent is not supported")
        p = float(exponent)
        scale = p * (self.value ** (p - 1.0))
        return Dual(self.value ** p, [scale * t for t in self.tangents])

    def tanh(self):
        h = np.tanh(self.value)
        slope = 1.0 - h * h
        return Dual(h, [slope * t for t in self.tangents])

    def exp(self):
        e = np.exp(self.value)
        return Dual(e, [e * t for t in self.tangents])

    def sqrt(self):
        s = np.sqrt(self.value)
        return Dual(s, [(0.5 * t) / s for t in self.tangents])

    def erf(self):
        slope = _TWO_OVER_SQRT_PI * np.exp(-(self.value * self.value))
        return Dual(special.erf(self.value), [slope * t for t in self.tangents])

    def __getitem__(self, index):
        return Dual(self.value[index], [_broadcast_like(t, self.shape)[index] for t in self.tangents])

    def sum(self, axis=None, keepdims=False):
        return Dual(
            self.value.sum(axis=axis, keepdims=keepdims),
            [_sum(t, axis, keepdims, value_of(self.value).shape) for t in self.tangents],
        )

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Dual(self.value.reshape(shape), [_broadcast_like(t, self.shape).reshape(shape) for t in self.tangents])

    def transpose(self, axes=None):
        return Dual(
            self.value.transpose(axes), [_broadcast_like(t, self.shape).transpose(axes) for t in self.tangents]
        )

    def clip(self, lo, hi):
        mask = _clip_mask(value_of(self.value), lo, hi).astype(float)
        return Dual(clip(self.value, lo, hi), [t * mask for t in self.tangents])

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            raise UnsupportedPrimitiveError(f"{ufunc.__name__}.{method} is not a supported primitive")
        unary = {np.tanh: "tanh", np.exp: "exp", np.sqrt: "sqrt", special.erf: "erf", np.negative: "__neg__"}
        if ufunc in unary:
            return getattr(inputs[0], unary[ufunc])()
        if ufunc is np.square:
            return inputs[0] * inputs[0]
        binary = {
            np.add: ("__add__", "__radd__"),
            np.subtract: ("__sub__", "__rsub__"),
            np.multiply: ("__mul__", "__rmul__"),
            np.true_divide: ("__truediv__", "__rtruediv__"),
            np.matmul: ("__matmul__", "__rmatmul__"),
        }
        if ufunc in binary:
            left, right = inputs
            forward, reflected = binary[ufunc]
            if isinstance(left, Dual):
                return getattr(left, forward)(right)
            return getattr(right, reflected)(left)
        if ufunc is np.power and isinstance(inputs[0], Dual):
            return inputs[0] ** inputs[1]
        raise UnsupportedPrimitiveError(f"{ufunc.__name__} is not a supported primitive")


def _plus(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _broadcast_like(t, shape):
    """Tangents may be stored broadcastable; materialise before shape changes."""
    if value_of(t).shape == tuple(shape):
        return t
    return t + np.zeros(shape)


def _sum(t, axis, keepdims, shape):
    return _broadcast_like(t, shape).sum(axis=axis, keepdims=keepdims)


def clip(x, lo, hi):
    """Clamp elementwise; gradient passes strictly inside, zero at the bounds."""
    if isinstance(x, (Var, Dual)):
        return x.clip(lo, hi)
    return np.clip(x, lo, hi)


def stack(items: Sequence[Any], axis: int = 0):
    """``np.stack`` for arrays, traced values and duals."""
    if any(isinstance(x, Dual) for x in items):
        width = next(len(x.tangents) for x in items if isinstance(x, Dual))
        values = [x.value if isinstance(x, Dual) else x for x in items]
        shape = value_of(values[0]).shape
        tangents = []
        for k in range(width):
            column = [
                _broadcast_like(x.tangents[k], shape) if isinstance(x, Dual) else np.zeros(shape) for x in items
            ]
            tangents.append(stack(column, axis=axis))
        return Dual(stack(values, axis=axis), tangents)
    if any(isinstance(x, Var) for x in items):
        return apply(STACK, *items, axis=axis)
    return np.stack([np.asarray(x) for x in items], axis=axis)


def value_and_grad(f: Callable[[Var], Any], inputs) -> Tuple[float, np.ndarray]:
    """Record ``f`` on a fresh tape and return its value and gradient."""
    tape = Tape()
    w = tape.variable(inputs)
    out = f(w)
    if not isinstance(out, Var):
        return float(np.asarray(out)), np.zeros_like(w.value)
    return float(out.value), tape.gradient(out, w)


def grad(f: Callable[[Var], Any], inputs) -> np.ndarray:
    """Gradient of a scalar function of one parameter array, by a single reverse sweep."""
    return value_and_grad(f, inputs)[1]


def jvp(f: Callable[[Any], Any], x, v):
    """Directional derivative of ``f`` at ``x`` along ``v`` (forward mode).

    ``x`` and ``v`` may be arrays or traced values; when traced, the result
    is itself recorded and can be differentiated again by reverse mode.
    """
    out = f(Dual(x, (v,)))
    if not isinstance(out, Dual):
        return np.zeros_like(value_of(out))
    return out.tangents[0]


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * max(1, |x_i|)`` per coordinate."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        h = rel_step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
