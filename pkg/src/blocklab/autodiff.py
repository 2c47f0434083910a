"""Dense float64 tensors with taped reverse-mode differentiation.

Every primitive records its application on the active Tape; backward
replays the tape in reverse, accumulating exact vector-Jacobian products.
A central finite-difference oracle is provided for cross-checking.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_local = threading.local()


def _active_tape() -> "Tape":
    stack = getattr(_local, "tapes", None)
    if not stack:
        raise RuntimeError("no active Tape; wrap the computation in `with Tape():`")
    return stack[-1]


class Tensor:
    """Dense float64 array, optionally a named parameter leaf."""

    __slots__ = ("data", "param_id", "op", "tape")

    def __init__(self, data: np.ndarray, param_id: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.param_id = param_id
        self.op: _Record | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" param={self.param_id!r}" if self.param_id else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(name: str, data: np.ndarray) -> Tensor:
    """Create a registered parameter leaf; rejects non-finite entries."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"parameter {name!r} contains non-finite entries")
    return Tensor(arr, param_id=name)


def constant(data: np.ndarray) -> Tensor:
    """Create an untracked leaf; gradients do not flow into it by name."""
    return Tensor(data)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    """One primitive application: inputs, replayable forward, and its VJP."""

    __slots__ = ("name", "inputs", "out", "fwd", "vjp")

    def __init__(self, name, inputs, out, fwd, vjp):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.fwd = fwd
        self.vjp = vjp


class Tape:
    """Append-only trace of primitive applications (a Wengert list).

    Creation order is a topological order of the computation DAG, so
    reverse iteration yields exact reverse-mode accumulation. A tape is
    confined to a single thread.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def _emit(self, name, inputs, out_data, fwd, vjp) -> Tensor:
        out = Tensor(out_data)
        out.op = rec = _Record(name, tuple(inputs), out, fwd, vjp)
        out.tape = self
        self.records.append(rec)
        return out

    def replay(self) -> int:
        """Re-run every recorded forward; error unless bit-for-bit equal."""
        for rec in self.records:
            fresh = rec.fwd(*[t.data for t in rec.inputs])
            if not np.array_equal(fresh, rec.out.data):
                raise AssertionError(f"replay mismatch in primitive {rec.name!r}")
        return len(self.records)

    def backward(
        self,
        loss: Tensor,
        params: Mapping[str, Tensor] | Sequence[Tensor],
        seed: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of `loss` for every named parameter.

        Parameters the loss does not reach get exact zeros. `seed` is the
        output cotangent (defaults to 1 for a scalar loss).
        """
        if isinstance(params, Mapping):
            plist = list(params.values())
        else:
            plist = list(params)
        for p in plist:
            if p.param_id is None:
                raise ValueError("backward params must be named parameters")
        if loss.tape is not None and loss.tape is not self:
            raise ValueError("loss was traced on a different Tape")
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("loss must be scalar (or provide a seed cotangent)")
            seed = np.ones_like(loss.data)
        adjoint: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        for rec in reversed(self.records):
            g = adjoint.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None:
                    continue
                acc = adjoint.get(id(t))
                adjoint[id(t)] = gi if acc is None else acc + gi
        return {
            p.param_id: adjoint.get(id(p), np.zeros_like(p.data)) for p in plist
        }


def backward(loss: Tensor, params) -> dict[str, np.ndarray]:
    """Gradient map of a traced scalar loss; errors on untraced loss nodes."""
    if loss.tape is None:
        if loss.op is None and loss.param_id is None:
            # plain constant: zero gradient everywhere
            plist = params.values() if isinstance(params, Mapping) else params
            return {p.param_id: np.zeros_like(p.data) for p in plist}
        raise ValueError("loss was not produced by traced primitives")
    return loss.tape.backward(loss, params)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _active_tape()._emit("add", (a, b), out, lambda x, y: x + y, vjp)


def neg(a: Tensor) -> Tensor:
    return _active_tape()._emit(
        "neg", (a,), -a.data, lambda x: -x, lambda g: (-g,)
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _active_tape()._emit(
        "scale", (a,), a.data * c, lambda x: x * c, lambda g: (g * c,)
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _active_tape()._emit("mul", (a, b), out, lambda x, y: x * y, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching; fast path for stacked @ 2-D."""
    out = np.matmul(a.data, b.data)

    if a.data.ndim > 2 and b.data.ndim == 2:
        k = a.data.shape[-1]

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            a2 = a.data.reshape(-1, k)
            return (g2 @ b.data.T).reshape(a.data.shape), a2.T @ g2

    else:

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return (
                _unbroadcast(ga, a.data.shape),
                _unbroadcast(gb, b.data.shape),
            )

    return _active_tape()._emit("matmul", (a, b), out, np.matmul, vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    fwd = lambda x: np.swapaxes(x, -1, -2)
    return _active_tape()._emit(
        "transpose", (a,), fwd(a.data), fwd, lambda g: (np.swapaxes(g, -1, -2),)
    )


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    fwd = lambda x: np.swapaxes(x, i, j)
    return _active_tape()._emit(
        "swapaxes", (a,), fwd(a.data), fwd, lambda g: (np.swapaxes(g, i, j),)
    )


def reshape(a: Tensor, shape: tuple) -> Tensor:
    fwd = lambda x: np.reshape(x, shape)
    return _active_tape()._emit(
        "reshape", (a,), fwd(a.data), fwd, lambda g: (g.reshape(a.data.shape),)
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    fwd = lambda x: x[idx]
    return _active_tape()._emit("narrow", (a,), a.data[idx], fwd, vjp)


def sum_all(a: Tensor) -> Tensor:
    fwd = lambda x: np.asarray(np.sum(x))
    return _active_tape()._emit(
        "sum_all", (a,), fwd(a.data), fwd,
        lambda g: (np.broadcast_to(g, a.data.shape).copy(),),
    )


def inner(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product <a, b> as a traced scalar."""
    return sum_all(mul(a, b))


def embedding(w: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather w[ids]; the VJP scatter-adds into the gathered rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= w.data.shape[0]):
        raise ValueError("embedding ids out of range")

    def vjp(g):
        gw = np.zeros_like(w.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, w.data.shape[-1]))
        return (gw,)

    fwd = lambda x: x[ids]
    return _active_tape()._emit("embedding", (w,), w.data[ids], fwd, vjp)


def softmax_rows(m: Tensor, causal: bool = False) -> Tensor:
    """Row-wise softmax over the last axis.

    With `causal`, positions j > i of the trailing two axes are forced to
    exactly 0 (the -inf mask of next-token attention).
    """

    def fwd(x):
        if causal:
            n_q, n_k = x.shape[-2], x.shape[-1]
            keep = np.tril(np.ones((n_q, n_k), dtype=bool))
            xm = np.where(keep, x, -np.inf)
        else:
            xm = x
        if not np.all(np.isfinite(np.max(xm, axis=-1))):
            raise ValueError("softmax row fully masked or non-finite")
        z = xm - np.max(xm, axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / np.sum(e, axis=-1, keepdims=True)
        if causal:
            out = np.where(keep, out, 0.0)
        return out

    out = fwd(m.data)

    def vjp(g):
        s = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - s),)

    return _active_tape()._emit("softmax_rows", (m,), out, fwd, vjp)


def normalize(
    x: Tensor, gamma: Tensor, kind: str = "layernorm", eps: float = 1e-5
) -> Tensor:
    """LayerNorm / RMSNorm over the last axis with learnable gain, no bias.

    LayerNorm standardizes each row to zero mean and unit (biased) variance;
    RMSNorm skips the mean subtraction. eps=0 makes the standardized rows
    satisfy sum(x_std^2) = D exactly.
    """
    if kind not in ("layernorm", "rmsnorm"):
        raise ValueError(f"unknown norm kind {kind!r}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    d = x.data.shape[-1]
    if kind == "layernorm" and d < 2:
        raise ValueError("layernorm needs at least 2 features per row")

    if kind == "layernorm":

        def fwd(xv, gv):
            mu = xv.mean(axis=-1, keepdims=True)
            xc = xv - mu
            var = np.mean(xc * xc, axis=-1, keepdims=True)
            if np.any(var + eps == 0.0):
                raise ZeroDivisionError("zero row variance with eps=0")
            return (xc * (1.0 / np.sqrt(var + eps))) * gv

        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        if np.any(var + eps == 0.0):
            raise ZeroDivisionError("zero row variance with eps=0")
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gamma.data

        def vjp(g):
            gg = _unbroadcast(g * xhat, gamma.data.shape)
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
            )
            return gx, gg

    else:

        def fwd(xv, gv):
            ms = np.mean(xv * xv, axis=-1, keepdims=True)
            if np.any(ms + eps == 0.0):
                raise ZeroDivisionError("zero row norm with eps=0")
            return xv * (1.0 / np.sqrt(ms + eps)) * gv

        ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
        if np.any(ms + eps == 0.0):
            raise ZeroDivisionError("zero row norm with eps=0")
        inv = 1.0 / np.sqrt(ms + eps)
        out = x.data * inv * gamma.data

        def vjp(g):
            gg = _unbroadcast(g * x.data * inv, gamma.data.shape)
            gp = g * gamma.data
            gx = inv * gp - x.data * (
                np.sum(gp * x.data, axis=-1, keepdims=True) * inv**3 / d
            )
            return gx, gg

    return _active_tape()._emit("normalize", (x, gamma), out, fwd, vjp)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _active_tape()._emit(
        "relu", (a,), out,
        lambda x: np.maximum(x, 0.0),
        lambda g: (g * (a.data > 0.0),),
    )


def leaky_relu(a: Tensor, alpha: float) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError("leaky-relu slope must lie in (0, 1)")

    def fwd(x):
        return np.where(x > 0.0, x, alpha * x)

    return _active_tape()._emit(
        "leaky_relu", (a,), fwd(a.data), fwd,
        lambda g: (g * np.where(a.data > 0.0, 1.0, alpha),),
    )


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian Error Linear Unit, 0.5 x (1 + erf(x/sqrt(2)))."""

    def fwd(x):
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g):
        x = a.data
        d = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * d,)

    return _active_tape()._emit("gelu", (a,), fwd(a.data), fwd, vjp)


def activation(a: Tensor, kind: str, alpha: float = 0.01) -> Tensor:
    """Elementwise nonlinearity selected by name."""
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "gelu":
        return gelu(a)
    raise ValueError(f"unknown activation {kind!r}")


def cross_entropy_next_token(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over positions of -log softmax(logits)[target]."""
    targets = np.asarray(targets)
    d = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= d):
        raise ValueError("target id out of vocabulary range")
    flat_t = targets.reshape(-1)
    n = flat_t.size

    def fwd(x):
        x2 = x.reshape(-1, d)
        m = np.max(x2, axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(x2 - m), axis=-1))
        return np.asarray(np.mean(lse - x2[np.arange(n), flat_t]))

    x2 = logits.data.reshape(-1, d)
    m = np.max(x2, axis=-1, keepdims=True)
    e = np.exp(x2 - m)
    p = e / np.sum(e, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(e, axis=-1))
    out = np.asarray(np.mean(lse - x2[np.arange(n), flat_t]))

    def vjp(g):
        gx = p.copy()
        gx[np.arange(n), flat_t] -= 1.0
        gx *= float(g) / n
        return (gx.reshape(logits.data.shape),)

    return _active_tape()._emit("cross_entropy", (logits,), out, fwd, vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(
    f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central differences (f(t+h e_i) - f(t-h e_i)) / 2h per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius relative error ||a-b|| / max(||a||, ||b||, 1e-12)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
