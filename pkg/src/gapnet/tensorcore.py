"""Small deterministic tensor engine with reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy array. Operations executed while a :class:`Tape`
is active (``with Tape() as tape:``) and touching a tensor that requires a
gradient are recorded; ``tape.backward(loss)`` then sweeps the record in
reverse. Outside a tape every operation is a plain NumPy computation, which is
how inference runs.

New primitives are defined with :func:`primitive`, which takes the forward
result, the parent tensors and a closure mapping the output gradient to one
gradient per parent.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    """N-dimensional array, optionally a leaf that collects gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass(eq=False)
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


class Tape:
    """Ordered record of executed primitives for one training step.

    Parents always precede the nodes that consume them because nodes are
    appended in execution order. A tape is owned by a single thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        node = Node(out, parents, backward, self)
        out.node = node
        self.nodes.append(node)

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last backward sweep with respect to ``t``."""
        if t.node is None:
            return t.grad
        return self._grads.get(id(t))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar ``loss``.

        Leaf gradients are added to ``tensor.grad``; a second call without
        zeroing them accumulates.
        """
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("loss is not attached to this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"gradient shape {pg.shape} != value shape {p.shape}")
                if p.node is not None and p.node.tape is self:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg.copy() if prev is None else prev + pg
                else:
                    p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
        self._grads = grads


def backward(loss: Tensor) -> None:
    if loss.node is None:
        raise TapeError("loss is detached: it was not computed under a tape")
    loss.node.tape.backward(loss)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Debug mode: scan every primitive output for NaN/Inf."""
    prev = getattr(_local, "check_finite", False)
    _local.check_finite = enabled
    try:
        yield
    finally:
        _local.check_finite = prev


class MacCounter:
    """Accumulates multiply-accumulate counts reported by primitives.

    Counts are attributed to the current module path, pushed by
    :meth:`scope`. Only primitives run while the counter is active report.
    """

    def __init__(self):
        self.path: list[str] = []
        self.by_path: dict[tuple[str, ...], int] = {}

    def __enter__(self) -> "MacCounter":
        _local.counter = self
        return self

    def __exit__(self, *exc) -> None:
        _local.counter = None

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self.path.append(name)
        try:
            yield
        finally:
            self.path.pop()

    def add(self, macs: int) -> None:
        key = tuple(self.path)
        self.by_path[key] = self.by_path.get(key, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_path.values())

    def under(self, *prefix: str) -> int:
        n = len(prefix)
        return sum(v for k, v in self.by_path.items() if k[:n] == prefix)


def active_counter() -> MacCounter | None:
    return getattr(_local, "counter", None)


def count_macs(macs: int) -> None:
    counter = active_counter()
    if counter is not None:
        counter.add(macs)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def primitive(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap a forward result and register its gradient rule on the active tape."""
    if getattr(_local, "check_finite", False) and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by primitive")
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None
    if out_shape != a.shape:
        raise ShapeError(f"operand {b.shape} must broadcast to {a.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return primitive(a.data + b.data, (a, b), lambda g: (g, unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return primitive(a.data - b.data, (a, b), lambda g: (g, unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return primitive(ad * bd, (a, b), lambda g: (g * bd, unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return primitive(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    count_macs(a.size)
    return primitive(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    eps = np.finfo(x.dtype).eps
    # keep the output strictly inside (0, 1) at the working precision
    s = np.clip(s, np.finfo(x.dtype).tiny, 1 - eps / 2).astype(x.dtype)
    count_macs(a.size)
    return primitive(s, (a,), lambda g: (g * s * (1 - s),))


ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise TensorError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "mul"):
        if b is None:
            raise TensorError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with NumPy batching over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    count_macs(out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def grad(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return primitive(out, (a, b), grad)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax input is not finite")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    count_macs(x.size)
    return primitive(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 0 for s in shape):
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    src = x.shape
    return primitive(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"{axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return primitive(out, (x,), lambda g: (np.transpose(g, inverse),))


def flatten_tokens(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C]; token (h, w) sits at index h*W + w."""
    n, c, h, w = x.shape
    return reshape(permute(x, (0, 2, 3, 1)), (n, h * w, c))


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    n, length, c = x.shape
    if length != h * w:
        raise ShapeError(f"{length} tokens cannot fill a {h}x{w} grid")
    return permute(reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of nothing")
    ref = parts[0].shape
    axis = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat extents disagree: {ref} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def grad(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            index[axis] = slice(int(lo), int(hi))
            grads.append(g[tuple(index)])
        return grads

    return primitive(out, parts, grad)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    sizes = [int(s) for s in sizes]
    axis = axis % x.ndim
    if any(s < 0 for s in sizes) or sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to extent {x.shape[axis]}")
    outs = []
    lo = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, lo + size)
        index = tuple(index)

        def grad(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(primitive(np.ascontiguousarray(x.data[index]), (x,), grad))
        lo += size
    return outs


def split_sizes(total: int, ratios: Sequence[float]) -> list[int]:
    """Integer split of ``total`` by ``ratios``; every share must be whole."""
    sizes = []
    for r in ratios:
        share = total * r
        if abs(share - round(share)) > 1e-9:
            raise ShapeError(f"ratio {r} of {total} channels is not an integer")
        sizes.append(int(round(share)))
    if sum(sizes) != total:
        raise ShapeError(f"split {sizes} does not cover {total}")
    return sizes


def _axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(a % x.ndim for a in axes))
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated reduction axes {axes}")
    return out


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _axes(x, axes)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("empty reduction")
    if kind == "sum":
        factor = 1.0
        out = x.data.sum(axis=axes, keepdims=keepdims)
    elif kind == "mean":
        factor = 1.0 / count
        out = x.data.sum(axis=axes, keepdims=keepdims) / x.dtype.type(count)
    else:
        raise TensorError(f"unknown reduction {kind!r}")
    src = x.shape

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * factor, src).astype(x.dtype),)

    return primitive(np.asarray(out, dtype=x.dtype), (x,), grad)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("sum", x, axes, keepdims)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst_input: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    tol: float = 1e-4,
    eps: float = 1e-5,
    samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. The floor is raised
    to ``10 * spacing(f) / (eps * tol)`` when that is larger: a difference
    quotient cannot resolve gradients finer than the few ulps of roundoff in
    ``f`` over ``eps``, so exactly-zero gradients would otherwise fail on
    roundoff alone. With ``samples`` set, that many coordinates are drawn
    across all inputs instead of all of them.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        y = f(*inputs)
        tape.backward(y)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def value() -> float:
        with no_tape():
            return float(f(*inputs).data.reshape(-1)[0])

    base = value()
    if value() != base:
        raise NonDeterministicError("f returned different values for identical inputs")
    floor = max(floor, 10 * float(np.spacing(abs(base))) / (eps * tol))

    coords = [(i, idx) for i, t in enumerate(inputs) for idx in np.ndindex(t.shape)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = (-1.0, 0, (), 0.0, 0.0)
    for i, idx in coords:
        data = inputs[i].data
        orig = data[idx]
        data[idx] = orig + eps
        fp = value()
        data[idx] = orig - eps
        fm = value()
        data[idx] = orig
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[i][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if err > worst[0]:
            worst = (err, i, idx, a, numeric)
    return GradCheckReport(
        max_rel_error=max(worst[0], 0.0),
        tol=tol,
        checked=len(coords),
        worst_input=worst[1],
        worst_index=tuple(int(v) for v in worst[2]),
        analytic=worst[3],
        numeric=worst[4],
    )
