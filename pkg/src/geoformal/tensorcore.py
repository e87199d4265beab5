"""Minimal dense tensor kernel with reverse-mode differentiation.

Tensors wrap 64-bit numpy arrays.  Every op builds a fresh tape node with a
hand-written backward; `Tensor.backward()` walks the graph once in reverse
topological order.  Ops never mutate their inputs; only the Adam optimizer
writes parameter data in place.  Wrap inference code in `no_grad()` to skip
tape construction entirely.
"""

from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    def __init__(self, op: str, *shapes: tuple):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")
        self.shapes = shapes


class NonPositiveTemperatureError(ValueError):
    def __init__(self, tau: float):
        super().__init__(f"temperature must be > 0, got {tau}")


class EmptyAfterMaskError(ValueError):
    def __init__(self):
        super().__init__("every position is ignored; loss is undefined")


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference paths)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatchError("backward (scalar required)", self.shape)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; floats coerce to constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not (_grad_enabled and any(p.requires_grad for p in parents)):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None

    def backward(go):
        _accumulate(a, _unbroadcast(go, a.shape))
        _accumulate(b, _unbroadcast(go, b.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError("sub", a.shape, b.shape) from None

    def backward(go):
        _accumulate(a, _unbroadcast(go, a.shape))
        _accumulate(b, _unbroadcast(-go, b.shape))

    return _node(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(go):
        _accumulate(a, -go)

    return _node(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape) from None

    def backward(go):
        _accumulate(a, _unbroadcast(go * b.data, a.shape))
        _accumulate(b, _unbroadcast(go * a.data, b.shape))

    return _node(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeMismatchError("div", a.shape, b.shape) from None

    def backward(go):
        _accumulate(a, _unbroadcast(go / b.data, a.shape))
        _accumulate(b, _unbroadcast(-go * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def backward(go):
        _accumulate(a, go * exponent * a.data ** (exponent - 1.0))

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(go):
        _accumulate(a, go / a.data)

    return _node(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(go):
        _accumulate(a, go * data)

    return _node(data, (a,), backward)


def absval(a: Tensor) -> Tensor:
    def backward(go):
        _accumulate(a, go * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0

    def backward(go):
        _accumulate(a, go * keep)

    return _node(a.data * keep, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU with its exact derivative."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(go):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        _accumulate(a, go * local)

    return _node(data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError("transpose (2-D only)", a.shape)

    def backward(go):
        _accumulate(a, go.T)

    return _node(a.data.T, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(go):
        _accumulate(a, go.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat (empty)", ())
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(go):
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * go.ndim
            index[axis] = slice(offset, offset + size)
            _accumulate(t, go[tuple(index)])
            offset += size

    return _node(data, tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(go):
        full = np.zeros_like(a.data)
        full[index] = go
        _accumulate(a, full)

    return _node(a.data[index].copy(), (a,), backward)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(go):
        g = go
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), backward)


def mean_pool(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor (len, dim)."""
    return concat([reshape(t, (1, t.shape[0])) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# Linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(go):
        _accumulate(a, go @ b.data.T)
        _accumulate(b, a.data.T @ go)

    return _node(data, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(go):
        dot = (go * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (go - dot))

    return _node(data, (a,), backward)


_MASK_TINY = 1e-30


def masked_softmax(logits: Tensor, mask: Tensor) -> Tensor:
    """Softmax over the last axis with multiplicative key weights.

    For a {0,1} mask this equals softmax with -inf logits at masked keys; soft
    masks in (0,1] interpolate smoothly and receive gradients.  Rows whose mask
    is entirely zero produce an all-zero output row (defined degenerate case)
    and contribute zero gradient.
    """
    try:
        mask_b = np.broadcast_to(mask.data, logits.shape)
    except ValueError:
        raise ShapeMismatchError("masked_softmax", logits.shape, mask.shape) from None
    live = mask_b > 0.0
    shifted_src = np.where(live, logits.data, -np.inf)
    row_max = shifted_src.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(logits.data - row_max)
    weighted = e * mask_b
    z = weighted.sum(axis=-1, keepdims=True)
    safe = z > _MASK_TINY
    z_safe = np.where(safe, z, 1.0)
    data = np.where(safe, weighted / z_safe, 0.0)

    def backward(go):
        dot = (go * data).sum(axis=-1, keepdims=True)
        d_logits = data * (go - dot)
        d_mask = np.where(safe, (e / z_safe) * (go - dot), 0.0)
        _accumulate(logits, d_logits)
        _accumulate(mask, _unbroadcast(d_mask, mask.shape))

    return _node(data, (logits, mask), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(go):
        d_xhat = go * gain.data
        term = d_xhat - d_xhat.mean(axis=-1, keepdims=True) \
            - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, term * inv)
        lead = tuple(range(go.ndim - 1))
        _accumulate(gain, (go * xhat).sum(axis=lead))
        _accumulate(bias, go.sum(axis=lead))

    return _node(data, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids_arr = np.asarray(ids, dtype=np.int64)
    if ids_arr.ndim != 1:
        raise ShapeMismatchError("embedding_lookup (1-D ids)", ids_arr.shape)
    if ids_arr.size and (ids_arr.min() < 0 or ids_arr.max() >= table.shape[0]):
        raise ShapeMismatchError("embedding_lookup (id out of range)", table.shape)
    data = table.data[ids_arr]

    def backward(go):
        d_table = np.zeros_like(table.data)
        np.add.at(d_table, ids_arr, go)
        _accumulate(table, d_table)

    return _node(data, (table,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row normalization for 1-D tensors, composed from primitives."""
    norm = power(tsum(mul(x, x)) + eps, 0.5)
    return div(x, norm)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention (q, d) x (n, d) x (n, d_v) -> (q, d_v).

    key_mask broadcasts over query rows; fully-masked inputs yield zero rows
    (see masked_softmax).
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatchError("attention (2-D only)", q.shape, k.shape, v.shape)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatchError("attention", q.shape, k.shape, v.shape)
    logits = mul(matmul(q, transpose(k)), Tensor(1.0 / math.sqrt(q.shape[1])))
    if key_mask is None:
        probs = softmax(logits, axis=-1)
    else:
        probs = masked_softmax(logits, key_mask)
    return matmul(probs, v)


def is_all_masked(key_mask: Tensor) -> bool:
    """Soft signal for the degenerate everything-dropped attention case."""
    return bool(np.all(key_mask.data <= 0.0))


# ---------------------------------------------------------------------------
# Losses and sampling
# ---------------------------------------------------------------------------

def cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    ignore_mask: Sequence[bool] | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Cross entropy of (L, V) logits against L integer targets.

    ignore_mask marks positions excluded from the loss.  reduction "mean"
    averages over included positions; "sum" matches a plain sum of negative
    log-likelihoods.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError("cross_entropy", logits.shape)
    n, vocab = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeMismatchError("cross_entropy targets", logits.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise ValueError(f"target id out of range for vocab {vocab}")
    include = np.ones(n, dtype=bool)
    if ignore_mask is not None:
        include = ~np.asarray(ignore_mask, dtype=bool)
    count = int(include.sum())
    if count == 0:
        raise EmptyAfterMaskError()
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(n), t]
    total = -(picked * include).sum()
    scale = 1.0 / count if reduction == "mean" else 1.0
    data = np.asarray(total * scale)

    def backward(go):
        probs = np.exp(log_probs)
        probs[np.arange(n), t] -= 1.0
        probs *= include[:, None]
        _accumulate(logits, probs * (float(go) * scale))

    return _node(data, (logits,), backward)


def gumbel_noise(rng: "Rng", shape: tuple[int, ...]) -> np.ndarray:
    u = np.clip(rng.uniform(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax(
    logits: Tensor, tau: float, hard: bool, rng: "Rng | None"
) -> Tensor:
    """Per-row Gumbel-Softmax sample; hard mode is one-hot with a
    straight-through gradient (the gradient of the soft sample).

    rng=None draws no noise (deterministic evaluation mode: plain softmax,
    or argmax one-hot when hard).
    """
    if tau <= 0.0:
        raise NonPositiveTemperatureError(tau)
    noise = 0.0 if rng is None else gumbel_noise(rng, logits.shape)
    scores = (logits.data + noise) / tau
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    soft = e / e.sum(axis=-1, keepdims=True)
    if hard:
        data = np.zeros_like(soft)
        np.put_along_axis(
            data, soft.argmax(axis=-1, keepdims=True), 1.0, axis=-1
        )
    else:
        data = soft

    def backward(go):
        dot = (go * soft).sum(axis=-1, keepdims=True)
        _accumulate(logits, soft * (go - dot) / tau)

    return _node(data, (logits,), backward)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    grad = np.zeros_like(x.data)
    flat = grad.reshape(-1)
    base = x.data.copy()
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            probe = base.copy().reshape(-1)
            probe[i] += sign * h
            value = f(Tensor(probe.reshape(base.shape))).item()
            flat[i] += sign * value
        flat[i] /= 2.0 * h
    return grad


def finite_diff_coord(
    f: Callable[[], float], param: Tensor, index: tuple[int, ...], h: float = 1e-5
) -> float:
    """Central difference along one coordinate of a parameter used inside f."""
    original = param.data[index]
    try:
        param.data[index] = original + h
        up = f()
        param.data[index] = original - h
        down = f()
    finally:
        param.data[index] = original
    return (up - down) / (2.0 * h)


# ---------------------------------------------------------------------------
# Counter-based splittable RNG
# ---------------------------------------------------------------------------

class Rng:
    """Philox-backed stream; `split(label)` derives an independent child
    stream from (seed, label) so identical (seed, label, draw index) always
    reproduces the same values.
    """

    def __init__(self, seed: int, _path: str = ""):
        self.seed = int(seed)
        self.path = _path
        digest = hashlib.blake2b(
            f"{self.seed}:{_path}".encode(), digest_size=16
        ).digest()
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(digest, "little"))
        )

    def split(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{label}")

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, shape)

    def integers(self, low: int, high: int, shape=None):
        result = self._gen.integers(low, high, size=shape)
        return int(result) if shape is None else result

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_index(self, weights: Sequence[float]) -> int:
        w = np.asarray(weights, dtype=np.float64)
        return int(self._gen.choice(len(w), p=w / w.sum()))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * (p.grad * p.grad)
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints: flat little-endian float64 + JSON sidecar
# ---------------------------------------------------------------------------

def save_params(params: dict[str, Tensor], prefix: str | Path) -> None:
    prefix = Path(prefix)
    names = sorted(params)
    index: dict[str, dict] = {}
    offset = 0
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name in names:
            src = params[name].data
            arr = np.ascontiguousarray(src, dtype="<f8")
            fh.write(arr.tobytes())
            index[name] = {"offset": offset, "shape": list(src.shape)}
            offset += arr.nbytes
    sidecar = {"schema": 1, "params": index}
    prefix.with_suffix(".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_params(prefix: str | Path, requires_grad: bool = True) -> dict[str, Tensor]:
    prefix = Path(prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    if sidecar.get("schema") != 1:
        raise ValueError(f"unsupported checkpoint schema: {sidecar.get('schema')!r}")
    raw = prefix.with_suffix(".bin").read_bytes()
    params: dict[str, Tensor] = {}
    for name, meta in sidecar["params"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            raw, dtype="<f8", count=count, offset=meta["offset"]
        ).reshape(shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=requires_grad)
    return params
