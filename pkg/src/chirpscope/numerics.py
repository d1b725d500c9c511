"""Small dense-tensor engine with a recorded tape for reverse-mode gradients.

Tensors wrap read-only float64 numpy arrays.  Every primitive is a
(forward, vjp) pair kept in ``PRIMITIVES``; applying one to tensors that live
on a :class:`Tape` appends a node so the computation can be differentiated
(``Tape.backward``) or replayed (``Tape.replay``).  Tensors with no tape are
constants and cost nothing beyond the forward evaluation.

    >>> tape = Tape()
    >>> x = tape.watch(np.array(3.0), "x")
    >>> y = x * x
    >>> float(tape.backward(y)[x])
    6.0
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "Primitive",
    "PRIMITIVES",
    "register",
    "apply",
    "backward",
    "grad_check",
    "GradCheckReport",
    "NonFiniteError",
    "ReplayError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "concat",
    "take",
    "tsum",
    "tmean",
    "relu",
    "gelu",
    "softmax_rows",
    "layer_norm",
]


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf."""


class ReplayError(RuntimeError):
    """Raised when re-running a recorded tape does not reproduce its outputs."""


def _as_array(value, owned: bool = False) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
    if arr.flags.writeable:
        # never freeze an array the caller still holds
        if not owned and (arr is value or arr.base is not None):
            arr = arr.copy()
        arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "_tape_ref", "node")

    def __init__(self, data, *, _tape: "Tape | None" = None, _node: int | None = None, _owned: bool = False):
        self.data = _as_array(data, _owned)
        # weak, so a finished tape and its intermediates are freed without the cycle collector
        self._tape_ref = None if _tape is None else weakref.ref(_tape)
        self.node = _node

    @property
    def tape(self) -> "Tape | None":
        return None if self._tape_ref is None else self._tape_ref()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    op: "Primitive | None"
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Tape:
    """Ordered record of primitive applications.

    Leaves are created with :meth:`watch`; anything computed from them is
    recorded.  The tape is single-threaded by design: one tape per training
    step.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value, _tape=self, _node=len(self.nodes))
        self.nodes.append(Node(None, (), t, name=name))
        return t

    @property
    def leaves(self) -> list[Tensor]:
        return [n.output for n in self.nodes if n.op is None]

    def _record(self, op: "Primitive", inputs, out: np.ndarray, attrs: dict) -> Tensor:
        t = Tensor(out, _tape=self, _node=len(self.nodes), _owned=True)
        self.nodes.append(Node(op, tuple(inputs), t, attrs))
        return t

    def replay(self) -> None:
        """Re-run every recorded forward and require bit-identical outputs."""
        for i, node in enumerate(self.nodes):
            if node.op is None:
                continue
            again = node.op.forward(*(x.data for x in node.inputs), **node.attrs)
            if again.shape != node.output.shape or not np.array_equal(again, node.output.data):
                raise ReplayError(f"node {i} ({node.op.name}) replay mismatch")

    def backward(self, output: Tensor, seed=None, *, check: bool = False) -> dict[Tensor, np.ndarray]:
        """Gradients of ``output`` (contracted with ``seed``) for every leaf.

        ``seed`` defaults to ones, which for a scalar output gives the plain
        gradient.  Leaves that do not influence ``output`` get zeros.
        """
        if check:
            self.replay()
        grads: dict[int, np.ndarray] = {}
        if output.tape is self:
            g0 = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
            if g0.shape != output.shape:
                raise ValueError(f"seed shape {g0.shape} != output shape {output.shape}")
            grads[output.node] = g0
            for idx in range(output.node, -1, -1):
                g = grads.get(idx)
                node = self.nodes[idx]
                if g is None or node.op is None:
                    continue
                needs = [x.tape is self for x in node.inputs]
                if not any(needs):
                    continue
                args = (g, node.output.data, *(x.data for x in node.inputs))
                if node.op.selective:
                    in_grads = node.op.vjp(*args, needs=tuple(needs), **node.attrs)
                else:
                    in_grads = node.op.vjp(*args, **node.attrs)
                for x, need, gx in zip(node.inputs, needs, in_grads):
                    if not need:
                        continue
                    if x.node in grads:
                        grads[x.node] = grads[x.node] + gx
                    else:
                        grads[x.node] = gx
        result = {}
        for leaf in self.leaves:
            result[leaf] = grads.get(leaf.node, np.zeros(leaf.shape))
        return result


def backward(tape: Tape, output: Tensor, seed=None) -> dict[Tensor, np.ndarray]:
    return tape.backward(output, seed)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[np.ndarray]]
    # rng -> (list of input arrays, attrs); used to sweep gradient checks
    sample: Callable[[np.random.Generator], tuple[list[np.ndarray], dict]] | None = None
    # vjp takes a ``needs`` tuple and may return None for unneeded inputs
    selective: bool = False
    # inputs -> array that changes exactly when a non-differentiable point is crossed
    kink: Callable[..., np.ndarray] | None = None


PRIMITIVES: dict[str, Primitive] = {}

# while grad_check probes a function, kink signatures of every primitive land here
_KINK_LOG: list | None = None


def register(name, forward, vjp, sample=None, selective=False, kink=None) -> Primitive:
    prim = Primitive(name, forward, vjp, sample, selective, kink)
    PRIMITIVES[name] = prim
    return prim


def apply(op: str | Primitive, *inputs, **attrs) -> Tensor:
    prim = PRIMITIVES[op] if isinstance(op, str) else op
    tensors = [_tensor(x) for x in inputs]
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise ValueError(f"{prim.name}: inputs recorded on different tapes")
    out = prim.forward(*(t.data for t in tensors), **attrs)
    if _KINK_LOG is not None and prim.kink is not None:
        _KINK_LOG.append(prim.kink(*(t.data for t in tensors)))
    if tapes:
        (tape,) = tapes.values()
        return tape._record(prim, tensors, out, attrs)
    return Tensor(out, _owned=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


def _rand(rng, *shape):
    return rng.standard_normal(shape)


# elementwise ---------------------------------------------------------------


def _add_fwd(a, b):
    _check_broadcast(a, b, "add")
    return a + b


register(
    "add",
    _add_fwd,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    lambda rng: ([_rand(rng, 3, 4), _rand(rng, 4)], {}),
)


def _sub_fwd(a, b):
    _check_broadcast(a, b, "sub")
    return a - b


register(
    "sub",
    _sub_fwd,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    lambda rng: ([_rand(rng, 2, 3), _rand(rng, 2, 1)], {}),
)


def _mul_fwd(a, b):
    _check_broadcast(a, b, "mul")
    return a * b


register(
    "mul",
    _mul_fwd,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    lambda rng: ([_rand(rng, 2, 3, 4), _rand(rng, 3, 1)], {}),
)

register(
    "scale",
    lambda a, k: a * k,
    lambda g, out, a, k: (g * k,),
    lambda rng: ([_rand(rng, 5)], {"k": float(rng.uniform(-2, 2))}),
)

register(
    "relu",
    lambda a: np.maximum(a, 0.0),
    lambda g, out, a: (g * (a > 0),),
    # keep samples away from the kink so central differences are meaningful
    lambda rng: ([_rand(rng, 4, 3) + np.sign(_rand(rng, 4, 3)) * 0.1], {}),
    kink=lambda a: a > 0,
)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

register(
    "gelu",
    lambda a: 0.5 * a * (1.0 + erf(a / _SQRT2)),
    lambda g, out, a: (g * (0.5 * (1.0 + erf(a / _SQRT2)) + a * _INV_SQRT2PI * np.exp(-0.5 * a * a)),),
    lambda rng: ([_rand(rng, 4, 3)], {}),
)

# structural ----------------------------------------------------------------


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def _matmul_vjp(g, out, a, b, needs=(True, True)):
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if needs[1] and b.ndim == 2:
        # fold batch dimensions into one GEMM
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    elif needs[1]:
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


register(
    "matmul",
    _matmul_fwd,
    _matmul_vjp,
    lambda rng: ([_rand(rng, 2, 3, 4), _rand(rng, 4, 5)], {}),
    selective=True,
)

register(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda g, out, a, axes: (np.transpose(g, np.argsort(axes)),),
    lambda rng: ([_rand(rng, 2, 3, 4)], {"axes": (2, 0, 1)}),
)

register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, a, shape: (g.reshape(a.shape),),
    lambda rng: ([_rand(rng, 2, 6)], {"shape": (3, 4)}),
)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, *xs, axis):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


register(
    "concat",
    _concat_fwd,
    _concat_vjp,
    lambda rng: ([_rand(rng, 2, 1, 3), _rand(rng, 2, 4, 3)], {"axis": 1}),
)


def _take_vjp(g, out, a, index, axis):
    ga = np.zeros(a.shape)
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    ga[tuple(sl)] = g
    return (ga,)


register(
    "take",
    lambda a, index, axis: np.take(a, index, axis=axis),
    _take_vjp,
    lambda rng: ([_rand(rng, 2, 5, 3)], {"index": 0, "axis": 1}),
)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


register(
    "sum",
    lambda a, axis=None, keepdims=False: np.asarray(np.sum(a, axis=axis, keepdims=keepdims)),
    _sum_vjp,
    lambda rng: ([_rand(rng, 3, 4)], {"axis": 1}),
)


def _mean_vjp(g, out, a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    (ga,) = _sum_vjp(g, out, a, axis, keepdims)
    return (ga / n,)


register(
    "mean",
    lambda a, axis=None, keepdims=False: np.asarray(np.mean(a, axis=axis, keepdims=keepdims)),
    _mean_vjp,
    lambda rng: ([_rand(rng, 3, 4)], {"axis": 0}),
)

# normalisation ---------------------------------------------------------------


def _softmax_fwd(a):
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


register(
    "softmax",
    _softmax_fwd,
    lambda g, s, a: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),),
    lambda rng: ([_rand(rng, 3, 5)], {}),
)


def _ln_stats(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc, 1.0 / np.sqrt(var + eps)


def _ln_fwd(x, gamma, beta, eps):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm: width {x.shape[-1]} vs gamma {gamma.shape}, beta {beta.shape}")
    xc, inv = _ln_stats(x, eps)
    return xc * inv * gamma + beta


def _ln_vjp(g, out, x, gamma, beta, eps):
    xc, inv = _ln_stats(x, eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    ggamma = np.sum(g * xhat, axis=lead)
    gbeta = np.sum(g, axis=lead)
    gx_hat = g * gamma
    gx = inv * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)
    )
    return gx, ggamma, gbeta


register(
    "layer_norm",
    _ln_fwd,
    _ln_vjp,
    lambda rng: ([_rand(rng, 3, 6), 1.0 + 0.3 * _rand(rng, 6), _rand(rng, 6)], {"eps": 1e-5}),
)


# ---------------------------------------------------------------------------
# public op wrappers
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return apply("add", a, b)


def sub(a, b) -> Tensor:
    return apply("sub", a, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def scale(a, k: float) -> Tensor:
    return apply("scale", a, k=float(k))


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def transpose(a, axes=None) -> Tensor:
    a = _tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return apply("transpose", a, axes=axes)


def swap_last(a) -> Tensor:
    a = _tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return apply("transpose", a, axes=tuple(axes))


def reshape(a, shape) -> Tensor:
    return apply("reshape", a, shape=tuple(shape))


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=axis)


def take(a, index: int, axis: int) -> Tensor:
    return apply("take", a, index=index, axis=axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply("sum", a, axis=axis, keepdims=keepdims)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", a, axis=axis, keepdims=keepdims)


def relu(a) -> Tensor:
    return apply("relu", a)


def gelu(a) -> Tensor:
    return apply("gelu", a)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    return apply("softmax", a)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, gamma, beta, eps=float(eps))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    checked: dict[str, int]
    # coordinates whose +-h stencil crossed a kink and were re-probed with a smaller step
    refined: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        status = "PASS" if self.passed else "FAIL"
        n = sum(self.checked.values())
        r = sum(self.refined.values())
        return (
            f"grad_check {status}: max rel err {self.max_error:.3e} (leaf {worst}, tol {self.tol:g}, "
            f"{n} coords, {r} refined at kinks)"
        )


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    samples_per_leaf: int | None = None,
    floor: float = 1e-8,
    seed: int = 0,
    min_h: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` receives a dict of leaf tensors and must return a scalar tensor.
    With ``samples_per_leaf`` set, that many coordinates per leaf are drawn at
    random; otherwise every coordinate is checked.  The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    Central differences are meaningless when ``x - h`` and ``x + h`` sit on
    different sides of a kink (a ReLU input changing sign).  Such crossings
    are detected from the primitives' kink signatures and the coordinate is
    re-probed with ``h / 10``, ``h / 100``, ... down to ``min_h``; the number
    of refined coordinates is reported.
    """
    global _KINK_LOG
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    tape = Tape()
    leaves = {k: tape.watch(v, k) for k, v in base.items()}
    out = f(leaves)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    grads = tape.backward(out)

    def value(name, flat_idx, delta):
        global _KINK_LOG
        arr = base[name].copy()
        arr.flat[flat_idx] += delta
        args = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        _KINK_LOG = []
        try:
            return f(args).item(), _KINK_LOG
        finally:
            _KINK_LOG = None

    def crossed(lo, hi):
        return len(lo) != len(hi) or any(a.shape != b.shape or not np.array_equal(a, b) for a, b in zip(lo, hi))

    rng = np.random.default_rng(seed)
    errors, checked, refined = {}, {}, {}
    for name, arr in base.items():
        analytic = grads[leaves[name]]
        if samples_per_leaf is None or samples_per_leaf >= arr.size:
            idx = np.arange(arr.size)
        else:
            idx = rng.choice(arr.size, size=samples_per_leaf, replace=False)
        worst, n_refined = 0.0, 0
        for i in idx:
            step = h
            (up, k_up), (dn, k_dn) = value(name, i, step), value(name, i, -step)
            if crossed(k_up, k_dn):
                n_refined += 1
                while crossed(k_up, k_dn) and step / 10 >= min_h:
                    step /= 10
                    (up, k_up), (dn, k_dn) = value(name, i, step), value(name, i, -step)
            num = (up - dn) / (2.0 * step)
            a = analytic.flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        errors[name] = worst
        checked[name] = len(idx)
        refined[name] = n_refined
    return GradCheckReport(errors, tol, checked, refined)
