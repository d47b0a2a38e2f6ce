"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A FieldTensor wraps values, an optional gradient, and the tape closure that
produced it.  Losses are scalar roots; backward() walks the tape once.
Everything runs in float64 and no op mutates its inputs.
"""

from __future__ import annotations

import json
import os
import threading
from contextlib import contextmanager

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class _GradMode(threading.local):
    """Per-thread tape switch: rollout workers disable recording without
    affecting the updating thread."""

    def __init__(self):
        self.enabled = True


_GRAD_MODE = _GradMode()


@contextmanager
def no_grad():
    """Disable tape recording (rollout-time forward passes)."""
    prev = _GRAD_MODE.enabled
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


def grad_enabled() -> bool:
    return _GRAD_MODE.enabled


class FieldTensor:
    """Dense array plus gradient slot and an optional representation tag."""

    __slots__ = ("values", "grad", "requires_grad", "rep_tag", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, rep_tag=None,
                 parents=(), backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.rep_tag = rep_tag
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"FieldTensor(shape={self.values.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar; floats/arrays promote to constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.values.size != 1:
            raise ValueError("backward() requires a scalar root")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> FieldTensor:
    if isinstance(x, FieldTensor):
        return x
    return FieldTensor(np.asarray(x, dtype=np.float64))


def constant(x) -> FieldTensor:
    return _as_tensor(x)


def _track(inputs) -> bool:
    return _GRAD_MODE.enabled and any(t.requires_grad or t._parents for t in inputs)


def _make(values, inputs, backward_fn, rep_tag=None) -> FieldTensor:
    if _track(inputs):
        return FieldTensor(values, parents=tuple(inputs), backward=backward_fn,
                           rep_tag=rep_tag)
    return FieldTensor(values, rep_tag=rep_tag)


def _accumulate(t: FieldTensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _wants(t: FieldTensor) -> bool:
    """Whether a tensor participates in the backward pass at all."""
    return t.requires_grad or bool(t._parents)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(grad.shape, shape)) if s == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise and arithmetic ops ------------------------------------------

def add(a: FieldTensor, b: FieldTensor) -> FieldTensor:
    out_vals = a.values + b.values

    def backward(g):
        if _wants(a):
            _accumulate(a, _unbroadcast(g, a.values.shape))
        if _wants(b):
            _accumulate(b, _unbroadcast(g, b.values.shape))
    return _make(out_vals, (a, b), backward)


def sub(a: FieldTensor, b: FieldTensor) -> FieldTensor:
    out_vals = a.values - b.values

    def backward(g):
        if _wants(a):
            _accumulate(a, _unbroadcast(g, a.values.shape))
        if _wants(b):
            _accumulate(b, _unbroadcast(-g, b.values.shape))
    return _make(out_vals, (a, b), backward)


def mul(a: FieldTensor, b: FieldTensor) -> FieldTensor:
    out_vals = a.values * b.values

    def backward(g):
        if _wants(a):
            _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        if _wants(b):
            _accumulate(b, _unbroadcast(g * a.values, b.values.shape))
    return _make(out_vals, (a, b), backward)


def relu(x: FieldTensor) -> FieldTensor:
    mask = x.values > 0.0
    out_vals = np.where(mask, x.values, 0.0)

    def backward(g):
        _accumulate(x, g * mask)
    return _make(out_vals, (x,), backward)


def tanh(x: FieldTensor) -> FieldTensor:
    out_vals = np.tanh(x.values)

    def backward(g):
        _accumulate(x, g * (1.0 - out_vals * out_vals))
    return _make(out_vals, (x,), backward)


def exp(x: FieldTensor) -> FieldTensor:
    out_vals = np.exp(x.values)

    def backward(g):
        _accumulate(x, g * out_vals)
    return _make(out_vals, (x,), backward)


def log(x: FieldTensor) -> FieldTensor:
    out_vals = np.log(x.values)

    def backward(g):
        _accumulate(x, g / x.values)
    return _make(out_vals, (x,), backward)


def softplus(x: FieldTensor) -> FieldTensor:
    v = x.values
    out_vals = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def backward(g):
        _accumulate(x, g / (1.0 + np.exp(-v)))
    return _make(out_vals, (x,), backward)


def clip(x: FieldTensor, lo: float, hi: float) -> FieldTensor:
    out_vals = np.clip(x.values, lo, hi)
    mask = (x.values >= lo) & (x.values <= hi)

    def backward(g):
        _accumulate(x, g * mask)
    return _make(out_vals, (x,), backward)


def minimum(a: FieldTensor, b: FieldTensor) -> FieldTensor:
    """Elementwise min; gradient routed to the first argument on ties."""
    take_a = a.values <= b.values
    out_vals = np.where(take_a, a.values, b.values)

    def backward(g):
        if _wants(a):
            _accumulate(a, _unbroadcast(g * take_a, a.values.shape))
        if _wants(b):
            _accumulate(b, _unbroadcast(g * ~take_a, b.values.shape))
    return _make(out_vals, (a, b), backward)


# --- shape ops ----------------------------------------------------------------

def reshape(x: FieldTensor, shape) -> FieldTensor:
    shape = tuple(shape)
    out_vals = x.values.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.values.shape))
    return _make(out_vals, (x,), backward, rep_tag=x.rep_tag)


def transpose_axes(x: FieldTensor, axes) -> FieldTensor:
    axes = tuple(axes)
    out_vals = np.transpose(x.values, axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inv))
    return _make(out_vals, (x,), backward)


def permute_last(x: FieldTensor, perm: np.ndarray) -> FieldTensor:
    """Reorder the last axis by a permutation; backward applies the inverse."""
    perm = np.asarray(perm, dtype=np.intp)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out_vals = x.values[..., perm]

    def backward(g):
        _accumulate(x, g[..., inv])
    return _make(out_vals, (x,), backward)


def concat(parts, axis: int = -1) -> FieldTensor:
    parts = list(parts)
    out_vals = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + size)
            if _wants(p):
                _accumulate(p, g[tuple(sl)])
            offset += size
    return _make(out_vals, tuple(parts), backward)


def gather(x: FieldTensor, flat_index: np.ndarray, out_shape, scale=None) -> FieldTensor:
    """out.flat[i] = x.flat[flat_index[i]] (* scale[i]); repeats allowed.

    The backbone of orbit-copied kernels and tied biases: backward
    scatter-adds into the free parameters.
    """
    flat_index = np.asarray(flat_index, dtype=np.intp).ravel()
    out_vals = x.values.ravel()[flat_index]
    if scale is not None:
        out_vals = out_vals * np.asarray(scale, dtype=np.float64).ravel()
    out_vals = out_vals.reshape(out_shape)

    def backward(g):
        gf = g.ravel()
        if scale is not None:
            gf = gf * np.asarray(scale, dtype=np.float64).ravel()
        acc = np.zeros(x.values.size)
        np.add.at(acc, flat_index, gf)
        _accumulate(x, acc.reshape(x.values.shape))
    return _make(out_vals, (x,), backward)


# --- reductions ----------------------------------------------------------------

def sum_op(x: FieldTensor, axis=None) -> FieldTensor:
    out_vals = x.values.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.values.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.values.shape).copy())
    return _make(out_vals, (x,), backward)


def mean(x: FieldTensor, axis=None) -> FieldTensor:
    if x.values.size == 0:
        raise ValueError("mean over an empty tensor")
    if axis is None:
        count = x.values.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.values.shape[ax]
    if count == 0:
        raise ValueError("mean over an empty axis")
    out_vals = x.values.mean(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / count, x.values.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis) / count,
                                           x.values.shape).copy())
    return _make(out_vals, (x,), backward)


def max_over_axis(x: FieldTensor, axis: int) -> FieldTensor:
    """Max reduction; backward routes to the first argmax on ties."""
    if x.values.shape[axis] == 0:
        raise ValueError("max over an empty axis")
    out_vals = x.values.max(axis=axis)
    arg = np.expand_dims(x.values.argmax(axis=axis), axis)

    def backward(g):
        acc = np.zeros_like(x.values)
        np.put_along_axis(acc, arg, np.expand_dims(g, axis), axis=axis)
        _accumulate(x, acc)
    return _make(out_vals, (x,), backward)


# --- linear algebra ------------------------------------------------------------

def matmul(a: FieldTensor, b: FieldTensor) -> FieldTensor:
    out_vals = a.values @ b.values

    def backward(g):
        av, bv = a.values, b.values
        if av.ndim > 2 or bv.ndim > 2:
            raise ValueError("matmul supports 1-D/2-D operands only")
        if _wants(a):
            _accumulate(a, np.outer(g, bv) if bv.ndim == 1 else g @ bv.T)
        if _wants(b):
            _accumulate(b, np.outer(av, g) if av.ndim == 1 else av.T @ g)
    return _make(out_vals, (a, b), backward)


def affine(x: FieldTensor, w: FieldTensor, b: FieldTensor) -> FieldTensor:
    """y = x W^T + b for W of shape (out, in); x is (in,) or (batch, in)."""
    xv = x.values
    if xv.shape[-1] != w.values.shape[1]:
        raise ValueError(f"affine: input dim {xv.shape[-1]} != weight in-dim {w.values.shape[1]}")
    if b.values.shape != (w.values.shape[0],):
        raise ValueError("affine: bias shape must be (out,)")
    out_vals = xv @ w.values.T + b.values

    def backward(g):
        if _wants(x):
            _accumulate(x, g @ w.values)
        if xv.ndim == 1:
            if _wants(w):
                _accumulate(w, np.outer(g, xv))
            if _wants(b):
                _accumulate(b, g)
        else:
            if _wants(w):
                _accumulate(w, g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1]))
            if _wants(b):
                _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _make(out_vals, (x, w, b), backward)


def conv2d(x: FieldTensor, k: FieldTensor, stride: int = 1, pad: int = 0) -> FieldTensor:
    """Cross-correlation of (N,Cin,H,W) or (Cin,H,W) with kernel (Cout,Cin,kh,kw)."""
    xv = x.values
    single = xv.ndim == 3
    if single:
        xv = xv[None]
    if xv.ndim != 4 or k.values.ndim != 4:
        raise ValueError("conv2d expects x (N,Cin,H,W) and kernel (Cout,Cin,kh,kw)")
    n, cin, h, w = xv.shape
    cout, kcin, kh, kw = k.values.shape
    if kcin != cin:
        raise ValueError(f"conv2d: kernel expects {kcin} input channels, got {cin}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError("conv2d: kernel larger than padded input")
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1

    padded = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N,Cin,Hout,Wout,kh,kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, hout * wout, cin * kh * kw)
    kmat = k.values.reshape(cout, cin * kh * kw)
    out_vals = (cols @ kmat.T).transpose(0, 2, 1).reshape(n, cout, hout, wout)
    if single:
        out_vals = out_vals[0]

    def backward(g):
        gv = g[None] if single else g
        gmat = gv.reshape(n, cout, hout * wout).transpose(0, 2, 1)  # (N,P,Cout)
        if _wants(k):
            dk = gmat.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])
            _accumulate(k, dk.reshape(k.values.shape))
        if _wants(x):
            dcols = (gmat @ kmat).reshape(n, hout, wout, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dpad = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    dpad[:, :, i:i + stride * hout:stride,
                         j:j + stride * wout:stride] += dcols[:, :, i, j]
            dx = dpad[:, :, pad:pad + h, pad:pad + w] if pad else dpad
            _accumulate(x, dx[0] if single else dx)
    return _make(out_vals, (x, k), backward)


def gaussian_logprob(mean_t: FieldTensor, log_std: FieldTensor, action) -> FieldTensor:
    """Diagonal-Gaussian log density summed over the last axis.

    Differentiable in mean and log_std; `action` is data, not a graph node.
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != mean_t.values.shape[-1]:
        raise ValueError("gaussian_logprob: action/mean dimension mismatch")
    for arr in (mean_t.values, log_std.values, action):
        if not np.all(np.isfinite(arr)):
            raise ValueError("gaussian_logprob: non-finite inputs")
    diff = sub(constant(action), mean_t)
    z = mul(diff, exp(-log_std))
    per_dim = add(mul(z, z), 2.0 * log_std + LOG_2PI)
    return mul(constant(-0.5), sum_op(per_dim, axis=-1))


# --- parameters, optimizer, checkpoints -----------------------------------------

class ParamStore:
    """Named trainable tensors with deterministic creation order and seeding."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.version = 0  # bumped whenever values change; layers key caches on it
        self._params: dict[str, FieldTensor] = {}

    def create(self, name: str, shape, init: str = "normal", scale: float = 1.0,
               values=None) -> FieldTensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        shape = tuple(shape)
        if values is not None:
            data = np.array(values, dtype=np.float64).reshape(shape)
        elif init == "normal":
            data = self.rng.standard_normal(shape) * scale
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "constant":
            data = np.full(shape, scale, dtype=np.float64)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = FieldTensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> FieldTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def num_parameters(self, prefix: str = "") -> int:
        return sum(t.values.size for name, t in self._params.items()
                   if name.startswith(prefix))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy_values_from(self, other: "ParamStore"):
        for name, t in self._params.items():
            t.values = other[name].values.copy()
        self.version += 1


class Adam:
    """Standard Adam on a ParamStore; deterministic given its state."""

    def __init__(self, store: ParamStore, lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(t.values) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.values) for name, t in store.items()}

    def step(self):
        missing = [name for name, t in self.store.items() if t.grad is None]
        if missing:
            raise ValueError(f"adam step with missing gradients: {missing}")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, t in self.store.items():
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.values = t.values - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        self.store.version += 1


def adam_step(store: ParamStore, lr: float = 3e-4, betas=(0.9, 0.999),
              eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """One Adam update; pass the returned state back in for subsequent steps."""
    if state is None:
        state = Adam(store, lr=lr, betas=betas, eps=eps)
    state.step()
    return state


def save_checkpoint(store: ParamStore, path: str, extra: dict | None = None):
    """Write manifest.json (names, shapes, seed) plus raw little-endian float64."""
    os.makedirs(path, exist_ok=True)
    manifest = {"seed": store.seed, "tensors": [], "extra": extra or {}}
    offset = 0
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name, t in store.items():
            data = np.ascontiguousarray(t.values, dtype="<f8")
            fh.write(data.tobytes())
            manifest["tensors"].append(
                {"name": name, "shape": list(t.values.shape), "offset": offset})
            offset += data.size
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path: str) -> tuple[ParamStore, dict]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    raw = np.fromfile(os.path.join(path, "params.bin"), dtype="<f8")
    store = ParamStore(manifest["seed"])
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        vals = raw[entry["offset"]:entry["offset"] + count].reshape(shape)
        store.create(entry["name"], shape, values=vals)
    return store, manifest.get("extra", {})
