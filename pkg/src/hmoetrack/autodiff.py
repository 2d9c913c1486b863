"""Dense float64 tensors with tape-based reverse-mode differentiation.

Shapes are explicit: elementwise ops require identical shapes and the only
implicit broadcast is tensor-with-python-scalar. Row-vector bias addition and
scalar-tensor products have their own ops so every broadcast is visible.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import erf

from hmoetrack.errors import ContractError, DimensionError, NumericError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """An immutable float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor{' ' + name if name else ''}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"{op} produced a non-finite value")
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records operations executed inside a ``with`` block, in execution order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _emit(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs_grad, op)
    tapes = _stack()
    if needs_grad and tapes:
        tapes[-1].nodes.append(Node(inputs, out, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericError("div: zero divisor")
    q = a.data / b.data
    return _emit("div", q, (a, b), lambda g: (g / b.data, -g * q / b.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", a.data + c, (a,), lambda g: (g,))


def scalar_mul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise DimensionError(f"scalar_mul: multiplier must have one element, got {s.shape}")
    sv = s.data.reshape(())

    def back(g):
        return g * sv, np.sum(g * a.data).reshape(s.shape)

    return _emit("scalar_mul", a.data * sv, (a, s), back)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-n vector to every row of ``a[..., n]``."""
    n = a.shape[-1]
    if b.shape != (n,):
        raise DimensionError(f"add_bias: bias shape {b.shape} does not match last axis of {a.shape}")
    return _emit("add_bias", a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("maximum", a, b)
    pick_a = a.data >= b.data
    return _emit(
        "maximum", np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a)
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return _emit(
        "minimum", np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a)
    )


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", a.data * pos, (a,), lambda g: (g * pos,))


def abs_(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as a NumericError instead
        y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _emit("softplus", y, (a,), lambda g: (g * s,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _emit("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _emit("matmul", a.data @ b.data, (a, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need at least 2 axes, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", a.data[idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit("stack", np.stack([t.data for t in tensors], axis=axis), tensors, back)


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _emit("sum", np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    ax = axis % a.ndim
    return _emit(
        "sum",
        a.data.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _emit("row_softmax", s, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias must be ({n},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gg = g.reshape(-1, n)
        dgain = (gg * xhat.reshape(-1, n)).sum(axis=0)
        dbias = gg.sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _emit("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), back)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape, params: Iterable["Parameter"] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Parameters listed in ``params`` that the loss does not reach get a zero
    gradient rather than ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    seen: dict[int, Tensor] = {id(loss): loss}
    produced: set[int] = set()
    for node in reversed(tape.nodes):
        key = id(node.output)
        produced.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
                seen[k] = inp
    for k, g in grads.items():
        if k in produced:
            continue
        leaf = seen[k]
        if not leaf.requires_grad:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if params is not None:
        for p in params:
            if p.tensor.grad is None:
                p.tensor.grad = np.zeros(p.tensor.shape)


def finite_difference_gradient(
    f: Callable[[Tensor], "Tensor | float"],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    With ``indices`` only those flat positions are probed; the others stay 0.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    base = x.data.reshape(-1)
    out = np.zeros(base.size)
    probe = range(base.size) if indices is None else indices

    def value(arr):
        r = f(Tensor(arr.reshape(x.shape)))
        return r.item() if isinstance(r, Tensor) else float(r)

    for i in probe:
        step = base.copy()
        step[i] += h
        hi = value(step)
        step[i] = base[i] - h
        lo = value(step)
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(x.shape)


# ---------------------------------------------------------------- parameters


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self) -> None:
        self.tensor.requires_grad = True
        self.tensor.name = self.name
        self.m = np.zeros(self.tensor.shape)
        self.v = np.zeros(self.tensor.shape)

    def assign(self, arr: np.ndarray) -> None:
        """Replace the values (used by the optimizer and checkpoint loading)."""
        arr = np.array(arr, dtype=np.float64).reshape(self.tensor.shape)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite update for parameter {self.name}")
        arr.flags.writeable = False
        self.tensor.data = arr


class ParamStore:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(value))
        self._params[name] = p
        return p.tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def num_values(self) -> int:
        return sum(p.tensor.size for p in self._params.values())

    def save(self, directory: str | Path) -> None:
        """Write ``params.bin`` (float64 little-endian) and ``params.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {}
        offset = 0
        with open(directory / "params.bin", "wb") as fh:
            for name, p in self._params.items():
                raw = p.tensor.data.astype("<f8").tobytes()
                fh.write(raw)
                manifest[name] = {"shape": list(p.tensor.shape), "offset": offset}
                offset += len(raw)
        (directory / "params.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    def load(self, directory: str | Path) -> None:
        directory = Path(directory)
        manifest = json.loads((directory / "params.json").read_text())
        raw = (directory / "params.bin").read_bytes()
        missing = sorted(set(self._params) - set(manifest))
        extra = sorted(set(manifest) - set(self._params))
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, p in self._params.items():
            entry = manifest[name]
            if tuple(entry["shape"]) != p.tensor.shape:
                raise ContractError(
                    f"checkpoint shape mismatch for {name}: {entry['shape']} vs {list(p.tensor.shape)}"
                )
            count = p.tensor.size
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
            p.assign(arr)


def adamw_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
) -> None:
    """One AdamW update with decoupled weight decay. Gradients are left in place."""
    params = list(params)
    missing = [p.name for p in params if p.tensor.grad is None]
    if missing:
        raise ContractError(f"adamw_step: no gradient for {', '.join(missing)}")
    b1, b2 = betas
    for p in params:
        g = p.tensor.grad
        p.step += 1
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        mhat = p.m / (1.0 - b1**p.step)
        vhat = p.v / (1.0 - b2**p.step)
        w = p.tensor.data * (1.0 - lr * weight_decay)
        p.assign(w - lr * mhat / (np.sqrt(vhat) + eps))
