"""Reverse-mode autodiff on numpy arrays, float64 only.

A Tensor wraps an ndarray and records the op that produced it; backward()
walks the implicit tape once in reverse topological order. Parameters live
in a ParamStore (named flat groups, per-group learning rate) and are updated
in place by Adam so later tapes see fresh values. Everything is
deterministic: same tape, same bytes out.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Iterable, Mapping

import numpy as np


class ContractViolation(ValueError):
    """An argument or file broke a documented precondition."""


class NumericalAbort(RuntimeError):
    """A computation produced non-finite values and cannot continue."""


class InternalError(RuntimeError):
    """Invariant broken inside the engine itself."""


_grad_enabled = True


class no_grad:
    """Context manager: ops built inside record no tape."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise InternalError("tensor passed where raw array expected")
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from hijacking `ndarray <op> Tensor`
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        # no_grad() silences op outputs, never explicit leaves
        self.requires_grad = bool(requires_grad) and (_grad_enabled or not _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        """Seed with ones and propagate. Loss must be a single scalar."""
        if self.data.size != 1:
            raise ContractViolation(f"backward() needs a scalar, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericalAbort("backward() on a non-finite loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            g = node.grad
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            if node._parents:
                node.grad = None  # free intermediates, keep leaves

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        a, b = self, _lift(other)
        out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b),
                     lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))
        return out

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _lift(other)
        return Tensor(a.data - b.data, a.requires_grad or b.requires_grad, (a, b),
                      lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))

    def __rsub__(self, other):
        return _lift(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _lift(other)
        return Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b),
                      lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                 _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _lift(other)
        return Tensor(a.data / b.data, a.requires_grad or b.requires_grad, (a, b),
                      lambda g: (_unbroadcast(g / b.data, a.data.shape),
                                 _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    def __rtruediv__(self, other):
        return _lift(other).__truediv__(self)

    def __neg__(self):
        a = self
        return Tensor(-a.data, a.requires_grad, (a,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor) or not np.isscalar(p):
            raise ContractViolation("only scalar exponents are supported")
        a, pf = self, float(p)
        return Tensor(a.data ** pf, a.requires_grad, (a,),
                      lambda g: (g * pf * a.data ** (pf - 1.0),))

    def __abs__(self):
        a = self
        return Tensor(np.abs(a.data), a.requires_grad, (a,),
                      lambda g: (g * np.sign(a.data),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # comparisons work on values and fall off the tape on purpose
    def __lt__(self, other):
        return self.data < _value(other)

    def __le__(self, other):
        return self.data <= _value(other)

    def __gt__(self, other):
        return self.data > _value(other)

    def __ge__(self, other):
        return self.data >= _value(other)

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]

        def back(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            return (buf,)

        return Tensor(out_data, a.requires_grad, (a,), back)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor(a.data.reshape(shape), a.requires_grad, (a,),
                      lambda g: (g.reshape(a.data.shape),))

    def transpose(self, axes=None):
        a = self
        ax = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
        inv = tuple(np.argsort(ax))
        return Tensor(a.data.transpose(ax), a.requires_grad, (a,),
                      lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def take(self, indices):
        """Row gather along axis 0; backward scatter-adds."""
        idx = np.asarray(indices)
        return self[idx]

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape).copy(),)

        return Tensor(out, a.requires_grad, (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def cumsum(self, axis):
        a = self
        return Tensor(np.cumsum(a.data, axis=axis), a.requires_grad, (a,),
                      lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))

    def clip(self, lo, hi):
        a = self
        mask_holder = {}

        def back(g):
            return (g * mask_holder["m"],)

        out = np.clip(a.data, lo, hi)
        mask_holder["m"] = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
        return Tensor(out, a.requires_grad, (a,), back)

    # -- elementwise (also available as module functions) ---------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor(out, a.requires_grad, (a,), lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor(np.log(a.data), a.requires_grad, (a,), lambda g: (g / a.data,))

    def log1p(self):
        a = self
        return Tensor(np.log1p(a.data), a.requires_grad, (a,),
                      lambda g: (g / (1.0 + a.data),))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor(out, a.requires_grad, (a,), lambda g: (g * 0.5 / out,))

    def sin(self):
        a = self
        return Tensor(np.sin(a.data), a.requires_grad, (a,),
                      lambda g: (g * np.cos(a.data),))

    def cos(self):
        a = self
        return Tensor(np.cos(a.data), a.requires_grad, (a,),
                      lambda g: (g * -np.sin(a.data),))

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor(out, a.requires_grad, (a,), lambda g: (g * (1.0 - out * out),))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _toposort(root: Tensor) -> list:
    """Post-order over grad-requiring ancestors, iterative, with cycle check."""
    VISITING, DONE = 1, 2
    state: dict[int, int] = {id(root): VISITING}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, Iterable]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            s = state.get(id(p))
            if s == VISITING:
                raise InternalError("cycle in the recorded graph")
            if s is None and p.requires_grad:
                state[id(p)] = VISITING
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            stack.pop()
            state[id(node)] = DONE
            order.append(node)
    return order


# -- functional forms (dispatch on Tensor vs ndarray) ------------------------

def _dispatch(name):
    np_fn = getattr(np, name)

    def fn(x):
        return getattr(x, name)() if isinstance(x, Tensor) else np_fn(x)

    fn.__name__ = name
    fn.__doc__ = f"{name}(x) for Tensor or ndarray."
    return fn


exp = _dispatch("exp")
log = _dispatch("log")
log1p = _dispatch("log1p")
sqrt = _dispatch("sqrt")
sin = _dispatch("sin")
cos = _dispatch("cos")
tanh = _dispatch("tanh")


def matmul(a, b):
    """a @ b where b is a matrix; a may carry leading batch dims."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.matmul(a, b)
    ta, tb = _lift(a), _lift(b)
    if tb.data.ndim != 2:
        raise ContractViolation("matmul: right-hand side must be 2-D")
    out = np.matmul(ta.data, tb.data)

    def back(g):
        ga = np.matmul(g, tb.data.T)
        if ta.data.ndim == 1:
            gb = np.outer(ta.data, g)
        else:
            axes = list(range(ta.data.ndim - 1))
            gb = np.tensordot(ta.data, g, axes=(axes, axes))
        return ga, gb

    return Tensor(out, ta.requires_grad or tb.requires_grad, (ta, tb), back)


def maximum(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.maximum(a, b)
    ta, tb = _lift(a), _lift(b)
    pick_a = (ta.data >= tb.data).astype(np.float64)  # ties go left
    return Tensor(np.maximum(ta.data, tb.data), ta.requires_grad or tb.requires_grad,
                  (ta, tb),
                  lambda g: (_unbroadcast(g * pick_a, ta.data.shape),
                             _unbroadcast(g * (1.0 - pick_a), tb.data.shape)))


def where(cond, a, b):
    c = np.asarray(_value(cond), dtype=bool)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.where(c, a, b)
    ta, tb = _lift(a), _lift(b)
    return Tensor(np.where(c, ta.data, tb.data), ta.requires_grad or tb.requires_grad,
                  (ta, tb),
                  lambda g: (_unbroadcast(g * c, ta.data.shape),
                             _unbroadcast(g * ~c, tb.data.shape)))


def concat(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    ts = [_lift(p) for p in parts]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return Tensor(out, any(t.requires_grad for t in ts), tuple(ts),
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack(parts, axis=axis)
    ts = [_lift(p) for p in parts]
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor(out, any(t.requires_grad for t in ts), tuple(ts), back)


def clip(x, lo, hi):
    return x.clip(lo, hi) if isinstance(x, Tensor) else np.clip(x, lo, hi)


def detach(x):
    return x.detach() if isinstance(x, Tensor) else x


def values(x) -> np.ndarray:
    """Underlying ndarray of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# -- parameters ---------------------------------------------------------------


class ParamStore:
    """Named float64 parameter groups with per-group learning rates."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._lr: dict[str, float] = {}

    def add(self, name: str, values, lr: float) -> Tensor:
        if name in self._tensors:
            raise ContractViolation(f"duplicate parameter group {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        self._lr[name] = float(lr)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def lr(self, name: str) -> float:
        return self._lr[name]

    def set_lr(self, name: str, lr: float) -> None:
        self._lr[name] = float(lr)

    @property
    def total_size(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Current grads; groups untouched by the tape come back as zeros."""
        out = {}
        for name, t in self._tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_values(self, mapping: Mapping[str, np.ndarray]) -> None:
        for name, arr in mapping.items():
            if name not in self._tensors:
                raise ContractViolation(f"unknown parameter group {name!r}")
            t = self._tensors[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.size != t.data.size:
                raise ContractViolation(
                    f"group {name!r}: expected {t.data.size} values, got {arr.size}")
            t.data[...] = arr.reshape(t.data.shape)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._tensors):
            h.update(name.encode("utf-8"))
            h.update(self._tensors[name].data.astype("<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(path, {n: t.data for n, t in self._tensors.items()})

    def load(self, path) -> None:
        loaded = load_checkpoint(path)
        missing = set(self._tensors) - set(loaded)
        extra = set(loaded) - set(self._tensors)
        if missing or extra:
            raise ContractViolation(
                f"checkpoint groups do not match store (missing={sorted(missing)}, "
                f"unexpected={sorted(extra)})")
        self.load_values(loaded)


class GradientTape:
    """One-shot backward over the implicit graph, scoped to a store."""

    def __init__(self, store: ParamStore):
        self.store = store

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        self.store.zero_grad()
        loss.backward()
        grads = self.store.gradients()
        self.store.zero_grad()
        return grads


def backward(tape: GradientTape, loss: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(loss)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction; per-group lr comes from the store."""

    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8,
                 lr_overrides: Mapping[str, float] | None = None):
        self.store = store
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self._lr_overrides = dict(lr_overrides or {})
        self.t = 0
        self.m = {n: np.zeros_like(store[n].data) for n in store.names()}
        self.v = {n: np.zeros_like(store[n].data) for n in store.names()}

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = self.store.gradients()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in self.store.names():
            g = np.asarray(grads.get(name, 0.0))
            if g.shape != self.m[name].shape:
                g = np.broadcast_to(g, self.m[name].shape)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            lr = self._lr_overrides.get(name, self.store.lr(name))
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.store[name].data -= step


def adam_step(opt: Adam, grads: Mapping[str, np.ndarray] | None = None) -> None:
    opt.step(grads)


# -- gradient verification -----------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], store: ParamStore, step: float = 1e-5,
                      sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients of f() and central differences.

    f must be deterministic and close over tensors from `store`. With
    `sample` set, only that many randomly chosen components per group are
    probed (the tape gradient is still computed for all of them).
    """
    tape = GradientTape(store)
    analytic = tape.backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in store.names():
        flat = store[name].data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = rng.choice(flat.size, size=sample, replace=False)
        for i in idx:
            keep = flat[i]
            with no_grad():
                flat[i] = keep + step
                hi = float(f().data)
                flat[i] = keep - step
                lo = float(f().data)
            flat[i] = keep
            num = (hi - lo) / (2.0 * step)
            rel = abs(gflat[i] - num) / (abs(gflat[i]) + 1e-8)
            if rel > worst:
                worst = rel
    return worst


# -- checkpoint format ----------------------------------------------------------
#
# magic "MSDF1", then u32 group count, then per group (sorted by name):
# u32 name length, UTF-8 name, u64 element count, raw little-endian float64.

_MAGIC = b"MSDF1"


def save_checkpoint(path, groups: Mapping[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", len(groups))
    for name in sorted(groups):
        data = np.asarray(groups[name], dtype=np.float64).reshape(-1)
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
        blob += struct.pack("<Q", data.size)
        blob += data.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != _MAGIC:
        raise ContractViolation(f"{path}: bad checkpoint magic {raw[:5]!r}")
    off = 5
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        groups: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (nelem,) = struct.unpack_from("<Q", raw, off)
            off += 8
            end = off + 8 * nelem
            if end > len(raw):
                raise ContractViolation(f"{path}: truncated group {name!r}")
            if name in groups:
                raise ContractViolation(f"{path}: duplicate group {name!r}")
            groups[name] = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64)
            off = end
    except struct.error as e:
        raise ContractViolation(f"{path}: truncated checkpoint ({e})") from None
    if off != len(raw):
        raise ContractViolation(f"{path}: {len(raw) - off} trailing bytes")
    return groups
