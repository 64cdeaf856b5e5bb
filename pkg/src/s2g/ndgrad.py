"""Dense float64 arrays with reverse-mode gradients, Adam, and checkpoint I/O.

Only the operations the solver needs are provided.  Vectors are carried as
``(1, d)`` rows so that every op is a plain 2-D numpy expression.
"""
from __future__ import annotations

import contextlib
import json
import struct
from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np


class NdGradError(Exception):
    pass


class ShapeMismatch(NdGradError):
    pass


class NonFinite(NdGradError):
    pass


class NoPath(NdGradError):
    pass


class CheckpointError(NdGradError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are stable across platforms and numpy releases
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}{self.data.shape}"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # operator sugar for model code
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFinite("non-finite value produced")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- forward ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), back)


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op} {a.shape} vs {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, parts, back)


def gather_rows(table: Tensor, index) -> Tensor:
    """Rows ``table[index]``; ``index`` is an int sequence (embedding lookup)."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(f"row index out of range for {table.shape}")

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), back)


def _logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -700, 700)))


def sigmoid(a: Tensor) -> Tensor:
    y = _logistic(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), back)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity (same object) at eval time or when ``p == 0``."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array([[a.data.sum()]]), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def neg_log_pick(dist: Tensor, index: int) -> Tensor:
    """``-log dist[0, index]`` for a ``(1, V)`` probability row."""
    p = dist.data[0, index]
    if p <= 0.0:
        raise NonFinite(f"log of zero probability at {index}")

    def back(g):
        out = np.zeros_like(dist.data)
        out[0, index] = -g.reshape(-1)[0] / p
        return (out,)

    return _result(np.array([[-np.log(p)]]), (dist,), back)


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor,
             b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step on row batches; gates ordered (reset, update, new).

    r = s(x Wr + h Ur), z = s(x Wz + h Uz), n = tanh(x Wn + r * (h Un)),
    h' = (1 - z) * n + z * h, each term with its bias.
    """
    d = h.shape[1]
    if x.shape[1] != w_ih.shape[0] or w_ih.shape[1] != 3 * d or w_hh.shape != (d, 3 * d):
        raise ShapeMismatch(f"gru_cell x{x.shape} h{h.shape} W_ih{w_ih.shape} W_hh{w_hh.shape}")
    xd, hd = x.data, h.data
    gi = xd @ w_ih.data + b_ih.data
    gh = hd @ w_hh.data + b_hh.data
    r = _logistic(gi[:, :d] + gh[:, :d])
    z = _logistic(gi[:, d:2 * d] + gh[:, d:2 * d])
    ghn = gh[:, 2 * d:]
    n = np.tanh(gi[:, 2 * d:] + r * ghn)
    out = (1.0 - z) * n + z * hd

    def back(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dz = g * (hd - n) * z * (1.0 - z)
        dr = dn * ghn * r * (1.0 - r)
        dgi = np.concatenate([dr, dz, dn], axis=1)
        dgh = np.concatenate([dr, dz, dn * r], axis=1)
        return (dgi @ w_ih.data.T if x.requires_grad else None,
                g * z + dgh @ w_hh.data.T if h.requires_grad else None,
                xd.T @ dgi if w_ih.requires_grad else None,
                hd.T @ dgh if w_hh.requires_grad else None,
                _unbroadcast(dgi, b_ih.shape) if b_ih.requires_grad else None,
                _unbroadcast(dgh, b_hh.shape) if b_hh.requires_grad else None)

    return _result(out, (x, h, w_ih, w_hh, b_ih, b_hh), back)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar, got {loss.shape}")
    if not loss.requires_grad:
        raise NoPath("loss does not depend on any tracked array")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    reached_leaf = False
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad += g
            reached_leaf = True
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    if not reached_leaf:
        raise NoPath("no tracked leaf reached")


# ---------------------------------------------------------------- parameters & Adam

class ParamStore:
    """Named parameters plus Adam moments, iterated in insertion order."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in self.params.values())))

    def num_values(self) -> int:
        return sum(t.data.size for t in self.params.values())


def init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_embedding(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return rng.normal(0.0, 0.01, size=(rows, dim))


def adam_step(store: ParamStore, lr: float, weight_decay: float = 0.0,
              clip_norm: float | None = 5.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> float:
    """Clip by global norm, take one decoupled-weight-decay Adam step, zero grads.

    Returns the gradient norm before clipping.
    """
    norm = store.grad_norm()
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
    store.step += 1
    t = store.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad * factor
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data)
        p.grad[...] = 0.0
    return norm


def lr_schedule(epoch: int, base: float = 1e-3, halve_every: int = 20) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base * 0.5 ** (epoch // halve_every)


# ---------------------------------------------------------------- checkpoints
#
# layout: 8-byte little-endian header length, UTF-8 JSON header
# {"names", "shapes", "step", "seed", "meta"}, then each array as '<f8' in name order.

_MAGIC = b"S2GCKPT1"


def save_checkpoint(path, store: ParamStore, seed: int | None = None, meta: dict | None = None) -> None:
    names = list(store.params)
    header = {"names": names, "shapes": [list(store.params[n].shape) for n in names],
              "step": store.step, "seed": seed, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(store.params[n].data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    arrays, off = {}, 16 + hlen
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at {name}")
        arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def load_into(store: ParamStore, arrays: dict[str, np.ndarray], step: int = 0) -> None:
    """Copy arrays into ``store``; names and shapes must match exactly."""
    if set(arrays) != set(store.params):
        missing = set(store.params) ^ set(arrays)
        raise CheckpointError(f"parameter names differ: {sorted(missing)[:5]}")
    for name, t in store.params.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
    for name, t in store.params.items():
        t.data[...] = arrays[name]
    store.step = step


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``array`` (modified in place, restored)."""
    out = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = array[i]
        array[i] = old + eps
        up = f()
        array[i] = old - eps
        down = f()
        array[i] = old
        out[i] = (up - down) / (2 * eps)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over a whole array; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return float(np.linalg.norm(analytic - numeric) / scale) if scale > 0 else 0.0
