"""A small reverse-mode autodiff engine on float64 numpy arrays.

Only what the relationship model needs is here: two-operand ``einsum``
(which covers matmul and the attention contractions), elementwise ops,
``expand`` / ``concat`` / ``gather`` for shape plumbing, and the two
probability losses. Broadcasting is deliberately limited to adding a bias
over the trailing axes; anything else must be spelled out with ``expand``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

EPS = 1e-7


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}{', grad' if self.requires_grad else ''})"

    # operator sugar for the ops below
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


# -- forward primitives ----------------------------------------------------

def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum. Each operand index must appear in the output or the
    other operand, so that both gradients are themselves einsums."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = ins.split(",")
    for sub, other in ((a_sub, b_sub + out_sub), (b_sub, a_sub + out_sub)):
        if len(set(sub)) != len(sub) or not set(sub) <= set(other):
            raise ShapeError(f"einsum subscripts {subscripts!r} not supported for gradients")
    try:
        data = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r} on {a.shape}, {b.shape}: {exc}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data))
        if b.requires_grad:
            _accumulate(b, np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data))

    return _result(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """``(n, k) @ (k, m)`` or ``(n, k) @ (k,)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return einsum("nk,km->nm" if b.data.ndim == 2 else "nk,k->n", a, b)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def add_bias(x, bias) -> Tensor:
    """``x + bias`` where ``bias.shape`` equals the trailing axes of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    k = bias.data.ndim
    if x.shape[x.data.ndim - k:] != bias.shape:
        raise ShapeError(f"bias {bias.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.data.ndim - k))

    def backward(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=lead))

    return _result(x.data + bias.data, (x, bias), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * c, (x,), lambda g: _accumulate(x, g * c))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: _accumulate(x, g * mask))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _result(x.data * factor, (x,), lambda g: _accumulate(x, g * factor))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: _accumulate(x, g * s * (1.0 - s)))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: _accumulate(x, g * inside))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.sum(), (x,), lambda g: _accumulate(x, np.full(x.shape, float(g))))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _result(x.data.mean(), (x,), lambda g: _accumulate(x, np.full(x.shape, float(g) / n)))


def mean(x, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        _accumulate(x, np.repeat(np.expand_dims(g, axis), n, axis=axis) / n)

    return _result(x.data.mean(axis=axis), (x,), backward)


def expand(x, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times along it."""
    x = as_tensor(x)
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result(data, (x,), lambda g: _accumulate(x, g.sum(axis=axis)))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, bounds, axis=axis)):
            _accumulate(x, part)

    return _result(data, xs, backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: _accumulate(x, np.transpose(g, inv)))


def gather(x, index) -> Tensor:
    """Advanced indexing ``x[index]``; repeated indices accumulate gradient."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _result(x.data[index], (x,), backward)


# -- losses -----------------------------------------------------------------

def bce_loss(p, y, eps: float = EPS) -> Tensor:
    """Mean binary cross entropy of probabilities ``p`` against 0/1 targets."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"bce: prediction {p.shape} vs target {y.shape}")
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    n = p.size
    value = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()

    def backward(g):
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
        _accumulate(p, float(g) * dp * inside)

    return _result(value, (p,), backward)


def bce_elementwise(p: np.ndarray, y: np.ndarray, eps: float = EPS) -> np.ndarray:
    pc = np.clip(p, eps, 1.0 - eps)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def focal_loss(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0, eps: float = EPS) -> float:
    """Scalar focal loss ``-alpha (1 - p_t)^gamma log(p_t)`` for ``y`` in {+1, -1}."""
    if y not in (1, -1):
        raise ValueError("focal loss label must be +1 or -1")
    pt = p if y == 1 else 1.0 - p
    pt = min(max(pt, eps), 1.0 - eps)
    return -alpha * (1.0 - pt) ** gamma * np.log(pt)


def focal_loss_tensor(p, y, alpha: float = 0.25, gamma: float = 2.0, eps: float = EPS) -> Tensor:
    """Mean focal loss over probabilities ``p`` with 0/1 targets (1 means y=+1)."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"focal: prediction {p.shape} vs target {y.shape}")
    sign = np.where(y > 0.5, 1.0, -1.0)
    pt_raw = np.where(y > 0.5, p.data, 1.0 - p.data)
    pt = np.clip(pt_raw, eps, 1.0 - eps)
    inside = (pt_raw >= eps) & (pt_raw <= 1.0 - eps)
    n = p.size
    q = 1.0 - pt
    value = (-alpha * q ** gamma * np.log(pt)).mean()

    def backward(g):
        dq = gamma * q ** (gamma - 1) if gamma != 0 else np.zeros_like(q)
        dpt = alpha * dq * np.log(pt) - alpha * q ** gamma / pt
        _accumulate(p, float(g) * dpt * sign * inside / n)

    return _result(value, (p,), backward)


# -- backward pass ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that needs it."""
    if loss.size != 1:
        raise GradientError("backward needs a scalar loss")
    if loss._backward is None:
        raise GradientError("no recorded forward graph behind this tensor")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # interior grads are not kept


def grad(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


# -- parameters, optimizer, checkpoints --------------------------------------

@dataclass
class LinearLayer:
    weight: Tensor  # (out, in)
    bias: Tensor    # (out,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, scale_: float = 1.0) -> "LinearLayer":
        w = rng.normal(0.0, scale_ / np.sqrt(n_in), size=(n_out, n_in))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear expects trailing dim {self.weight.shape[1]}, got {x.shape}")
        letters = "abcdefg"[: x.data.ndim - 1]
        return add_bias(einsum(f"{letters}i,oi->{letters}o", x, self.weight), self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    decay_epochs: tuple[int, ...] = ()
    decay_rate: float = 0.1
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_rate ** sum(1 for e in self.decay_epochs if epoch >= e)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState, epoch: int = 0) -> None:
    """SGD with momentum, in place: ``v = mu*v + g``, ``p -= lr*v``.

    Every gradient is checked before anything is touched, so a non-finite
    gradient leaves parameters and buffers unchanged.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k}")
    lr = state.lr_at(epoch)
    for k, g in grads.items():
        v = state.buffers.get(k)
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers[k] = v
        params[k].data = params[k].data - lr * v


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays plus a JSON header to a zip with fixed timestamps.

    ``np.savez`` stamps the wall clock into the archive; this doesn't, so
    identical contents give identical bytes.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name, payload):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)

        put("meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for k in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[k]), allow_pickle=False)
            put(f"{k}.npy", buf.getvalue())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    return arrays, meta


# -- finite differences ---------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-6, max_per_param: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> GradCheckResult:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    A coordinate passes when ``|a - n| <= atol`` or
    ``|a - n| <= rtol * max(|a|, |n|)``. ``max_per_param`` limits the
    number of coordinates probed per tensor (chosen with ``rng``).
    """
    analytic = grad(loss_fn(), params)
    worst, worst_name, failures, checked = 0.0, "", [], 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * step)
            a = analytic[name].reshape(-1)[i]
            diff = abs(a - num)
            rel = diff / max(abs(a), abs(num), 1e-300)
            checked += 1
            if diff > atol and rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
            if diff > atol and diff > rtol * max(abs(a), abs(num)):
                failures.append(f"{name}[{i}]: analytic {a:.8g} vs numeric {num:.8g}")
    return GradCheckResult(worst, worst_name, checked, failures)
