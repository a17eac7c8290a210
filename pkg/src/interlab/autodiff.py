"""Dense float64 tensors with a reverse-mode differentiation tape.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
output remembers its parents and a closure mapping the output gradient to
input gradients.  :func:`gradients` walks that graph in reverse topological
order and returns a plain ``{name: ndarray}`` map without mutating tensors, so
the same forward graph can be differentiated for several parameter subsets.
"""

from __future__ import annotations

import io
import json
import math
import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Incompatible operand shapes."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class OracleInvalidError(RuntimeError):
    """The function handed to the finite-difference oracle is not deterministic."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by op '{op}'")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _leading_broadcast(a: tuple, b: tuple, op: str) -> None:
    # b may broadcast over leading batch dims of a (or vice versa); nothing else
    if a == b:
        return
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return
    if len(a) <= len(b) and b[len(b) - len(a):] == a:
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _leading_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _leading_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _leading_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, (a,), lambda g: (g / x,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return dx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embedding: ids outside [0, {n})")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``.

    With no valid rows the loss is exactly 0 and every gradient is zero.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {logits.shape[0]} rows but {targets.shape[0]} targets")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _make(np.zeros(()), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")
    rows = np.nonzero(valid)[0]
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= logits.shape[1]:
        raise ShapeError("cross_entropy: target class out of range")
    x = logits.data[rows]
    x = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1))
    nll = lse - x[np.arange(len(rows)), tgt]
    loss = nll.mean()

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(len(rows)), tgt] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = p * (g / n_valid)
        return (full,)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- shape & reduction


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


def take_rows(a: Tensor, rows) -> Tensor:
    """Rows ``rows`` of a 2-D tensor (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return _make(a.data[rows], (a,), backward, "take_rows")


def gather(a: Tensor, index) -> Tensor:
    """``a.data[index]`` for a 1-D tensor and an integer index array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 1:
        raise ShapeError(f"gather expects a 1-D tensor, got {a.shape}")
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range [0, {n})")

    def backward(g):
        return (np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=n),)

    return _make(a.data[index], (a,), backward, "gather")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------- dropout


class DropoutStream:
    """Counter-based dropout randomness.

    Mask ``k`` depends only on ``(seed, k)``, so constructing a new stream
    with the same seed replays every mask of a forward pass exactly.
    """

    def __init__(self, key):
        self.key = tuple(int(k) for k in np.atleast_1d(key))
        self.counter = 0

    def next_keep_mask(self, shape, p: float) -> np.ndarray:
        rng = np.random.default_rng([*self.key, self.counter])
        self.counter += 1
        return rng.random(shape) >= p


def dropout(a: Tensor, p: float, stream: DropoutStream | None) -> Tensor:
    if p <= 0.0 or stream is None:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = stream.next_keep_mask(a.shape, p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- tape & gradients


class Tape:
    """Topologically ordered view of the ops recorded beneath a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes if n._backward is not None]


def _backprop(loss: Tensor) -> dict[int, np.ndarray]:
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if node._backward is None or g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def gradients(loss: Tensor, params, allow_unused: bool = False):
    """Reverse-mode gradients of a scalar ``loss``.

    ``params`` is either a mapping ``name -> Tensor`` (returns a dict keyed the
    same way) or a sequence of tensors (returns a list).  A parameter that the
    loss does not depend on raises unless ``allow_unused``, in which case its
    gradient is an explicit zero array.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"gradients: loss must be a scalar, got shape {loss.shape}")
    if isinstance(params, Mapping):
        names, tensors = list(params.keys()), list(params.values())
    else:
        names, tensors = None, list(params)
    raw = _backprop(loss) if loss.requires_grad else {}
    out = []
    for i, t in enumerate(tensors):
        g = raw.get(id(t))
        if g is None:
            if not allow_unused:
                label = names[i] if names else (t.name or f"#{i}")
                raise KeyError(f"parameter {label!r} is not on the tape of this loss")
            g = np.zeros_like(t.data)
        _check_finite(g, "backward")
        out.append(g)
    return dict(zip(names, out)) if names is not None else out


def finite_difference_grad(f: Callable[[dict], float], params: Mapping[str, np.ndarray],
                           eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params`` (coordinate by coordinate)."""
    if not 1e-7 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-7, 1e-2], got {eps}")
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    f0, f1 = float(f(work)), float(f(work))
    if f0 != f1:
        raise OracleInvalidError(f"f is not deterministic: {f0!r} != {f1!r}")
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(work))
            flat[i] = orig - eps
            fm = float(f(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


# ---------------------------------------------------------------- serialization

_MAGIC = b"ILNT"


def dump_named_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Encode ``{name: array}`` as: magic, count, then per tensor a JSON header
    ``{name, dtype, shape}`` and its little-endian float64 payload, in name order so equal
    mappings encode to equal bytes."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in sorted(tensors.items()):
        arr = np.asarray(arr, dtype=DTYPE)
        header = json.dumps({"name": name, "dtype": "f64", "shape": list(arr.shape)},
                            sort_keys=True).encode()
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def load_named_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != _MAGIC:
        raise ValueError("not a named-tensor container")
    (count,) = struct.unpack_from("<I", view, 4)
    pos, out = 8, {}
    for _ in range(count):
        (hlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        header = json.loads(bytes(view[pos:pos + hlen]))
        pos += hlen
        if header["dtype"] != "f64":
            raise ValueError(f"unsupported dtype {header['dtype']!r}")
        shape = tuple(header["shape"])
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(view):
            raise ValueError("named-tensor container is truncated")
        arr = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").astype(DTYPE).reshape(shape)
        pos += 8 * n
        out[header["name"]] = arr
    if pos != len(view):
        raise ValueError("trailing bytes after named-tensor container")
    return out


def parameters(values: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Wrap arrays as leaf tensors; only ``names`` (default: all) require grad."""
    grad_names = set(values) if names is None else set(names)
    return {k: Tensor(v, requires_grad=k in grad_names, name=k) for k, v in values.items()}
