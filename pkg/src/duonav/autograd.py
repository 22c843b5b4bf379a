"""Dense-tensor engine with reverse-mode automatic differentiation.

Just enough ops for a transformer: broadcasted arithmetic, batched matmul,
(masked) softmax, layer norm, GELU, embedding lookup, slicing/concat and a
finite-difference gradient checker. Backed by numpy, f64 by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = np.float64

# count of probability clamps in nll_loss (probs[target] == 0)
_clamp_warnings = 0


def set_default_dtype(name: str) -> None:
    """Select 'f64' (default) or 'f32' for newly created tensors."""
    global _DEFAULT_DTYPE
    if name == "f64":
        _DEFAULT_DTYPE = np.float64
    elif name == "f32":
        _DEFAULT_DTYPE = np.float32
    else:
        raise ValueError(f"unknown dtype {name!r}; expected 'f32' or 'f64'")


def default_dtype():
    return _DEFAULT_DTYPE


def clamp_warning_count() -> int:
    return _clamp_warnings


class NumericError(ArithmeticError):
    """A tensor op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d array plus the backward closure that produced it.

    The op graph doubles as the tape: `backward()` topologically sorts the
    ancestors and accumulates gradients additively across fan-out.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="tensor"):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        _check_finite(self.data, _op)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basics ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) tensor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd, _op="add")

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd, _op="mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        raise TypeError("tensor/tensor division not supported; use explicit ops")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        advanced = isinstance(idx, np.ndarray) or (
            isinstance(idx, tuple) and any(isinstance(i, np.ndarray) for i in idx)
        )

        def bwd(g):
            full = np.zeros_like(self.data)
            if advanced:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            self._accum(full)

        return Tensor(out_data, _parents=(self,), _backward=bwd, _op="getitem")

    # -- shape ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            self._accum(g.reshape(old))

        return Tensor(out_data, _parents=(self,), _backward=bwd, _op="reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bwd(g):
            self._accum(g.transpose(inv))

        return Tensor(out_data, _parents=(self,), _backward=bwd, _op="transpose")

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bwd(g):
            if axis is None:
                self._accum(np.broadcast_to(g, shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, shape).copy())

        return Tensor(out_data, _parents=(self,), _backward=bwd, _op="sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- free-function ops --------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast like np.matmul."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd, _op="matmul")


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g):
        x._accum(g * out_data)

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="exp")


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def bwd(g):
        x._accum(g / x.data)

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="log")


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bwd(g):
        x._accum(g * (1.0 - out_data * out_data))

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="tanh")


def sigmoid(x: Tensor) -> Tensor:
    out_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bwd(g):
        x._accum(g * out_data * (1.0 - out_data))

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU with analytic derivative."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        x._accum(g * d)

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="gelu")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Shift-stabilized softmax over `axis`.

    `mask` is a boolean array broadcastable to x (True = participates);
    masked entries get exactly zero probability and zero gradient.
    """
    xd = x.data
    if mask is None:
        shifted = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax row with all entries masked")
        neg = np.where(mask, xd, -np.inf)
        shifted = neg - neg.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
        out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accum(out_data * (g - dot))

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to mean 0 / var 1, then apply gain and bias."""
    n = x.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs last-axis length >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if bias.requires_grad:
            bias._accum(g.reshape(-1, n).sum(axis=0))
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x._accum((gg - m1 - xhat * m2) * inv)

    return Tensor(out_data, _parents=(x, gain, bias), _backward=bwd, _op="layer_norm")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table`; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out_data = table.data[ids]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accum(full)

    return Tensor(out_data, _parents=(table,), _backward=bwd, _op="embedding")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor(out_data, _parents=tuple(tensors), _backward=bwd, _op="concat")


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading index: out[...] = x[..., idx[...]]."""
    idx = np.asarray(idx)
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        x._accum(full)

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="gather_last")


def nll_loss(probs: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """-sum(log probs[target]) over all (unmasked) rows.

    `probs` is [..., C] with each row on the simplex. Zero target
    probabilities are clamped at 1e-12 and counted as warnings.
    """
    global _clamp_warnings
    targets = np.asarray(targets)
    p = gather_last(probs, targets)
    n_zero = int((p.data < 1e-12).sum())
    if n_zero:
        _clamp_warnings += n_zero
        p = clamp_min(p, 1e-12)
    logp = log(p)
    if mask is not None:
        logp = logp * Tensor(mask.astype(_DEFAULT_DTYPE))
    return -logp.sum()


def clamp_min(x: Tensor, lo: float) -> Tensor:
    out_data = np.maximum(x.data, lo)

    def bwd(g):
        x._accum(np.where(x.data >= lo, g, 0.0))

    return Tensor(out_data, _parents=(x,), _backward=bwd, _op="clamp_min")


# -- gradient checking --------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    rel_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    max_rel_err: float
    worst: str
    entries: list[GradCheckEntry] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}, worst: {self.worst})"
        )


def gradcheck(f, params: dict, h: float = 1e-6, tol: float = 1e-5,
              samples_per_param: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f() against central differences.

    `params` maps names to Tensors that f() reads. When samples_per_param is
    set, only that many randomly chosen coordinates per parameter are
    perturbed (full sweep otherwise). Relative error per coordinate is
    |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-8).
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    out = f()
    out.backward()
    ad_grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    entries = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is not None and samples_per_param < n:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = f().item()
            flat[c] = orig - h
            f_minus = f().item()
            flat[c] = orig
            g_fd = (f_plus - f_minus) / (2 * h)
            g_ad = ad_grads[name].reshape(-1)[c]
            rel = abs(g_ad - g_fd) / (abs(g_ad) + abs(g_fd) + 1e-8)
            worst = max(worst, rel)
        entries.append(GradCheckEntry(name, worst, len(coords)))

    max_entry = max(entries, key=lambda e: e.rel_err)
    return GradCheckReport(
        passed=max_entry.rel_err < tol,
        tol=tol,
        max_rel_err=max_entry.rel_err,
        worst=max_entry.name,
        entries=entries,
    )
