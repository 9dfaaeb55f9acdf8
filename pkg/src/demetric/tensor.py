"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is deliberately small: exactly what the attention
model, its losses, and the evaluator need.  There is no general
broadcasting; elementwise ops accept a same-shape tensor or a python
scalar, and the few structured products (row/column scaling, channel
gating) are dedicated ops with hand-written adjoints.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, DimensionError

Array = np.ndarray

_NORM_EPS = 1e-12


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Every op records its parent tensors and a closure that routes the
    output gradient back to them, so calling :meth:`backward` on a
    scalar result fills ``grad`` on each reachable tensor that has
    ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: Array, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: Array | None = None) -> None:
        """Reverse-mode pass seeded at this tensor.

        Without an explicit seed the tensor must be scalar; the seed is
        then 1.  Gradients accumulate, so zero them between passes.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor outside the differentiation graph")
        if seed is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise DimensionError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")

        order = _topological_order(self)
        self._accumulate(seed)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -----------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _raise_nonscalar(t: Tensor):
    raise DimensionError(f"item() on non-scalar tensor of shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    """Nodes in reverse topological order (root first), iteratively."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _as_operand(x) -> tuple[Array | float, Tensor | None]:
    """Split an op argument into raw value and (if any) graph parent."""
    if isinstance(x, Tensor):
        return x.data, x
    return float(x), None


# elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    bval, bt = _as_operand(b)
    if bt is not None and bt.data.shape != a.data.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {bt.shape}")
    out_data = a.data + bval
    parents = (a,) if bt is None else (a, bt)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if bt is not None and bt.requires_grad:
            bt._accumulate(g)

    return Tensor._from_op(out_data, parents, backward)


def sub(a: Tensor, b) -> Tensor:
    bval, bt = _as_operand(b)
    if bt is not None and bt.data.shape != a.data.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {bt.shape}")
    out_data = a.data - bval
    parents = (a,) if bt is None else (a, bt)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if bt is not None and bt.requires_grad:
            bt._accumulate(-g)

    return Tensor._from_op(out_data, parents, backward)


def mul(a: Tensor, b) -> Tensor:
    bval, bt = _as_operand(b)
    if bt is not None and bt.data.shape != a.data.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {bt.shape}")
    out_data = a.data * bval
    parents = (a,) if bt is None else (a, bt)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * bval)
        if bt is not None and bt.requires_grad:
            bt._accumulate(g * a.data)

    return Tensor._from_op(out_data, parents, backward)


def neg(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(2.0 * a.data * g)

    return Tensor._from_op(a.data * a.data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p``; fractional exponents need positive entries."""
    if p != int(p) and np.any(a.data <= 0.0):
        raise DimensionError("fractional power of non-positive entries")
    out_data = a.data ** p

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(p * a.data ** (p - 1.0) * g)

    return Tensor._from_op(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), backward)


def _sigmoid_values(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_values(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * s * (1.0 - s))

    return Tensor._from_op(s, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """Stable ``log(1 + exp(a))``; the adjoint is ``sigmoid(a)``."""
    out_data = np.logaddexp(0.0, a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * _sigmoid_values(a.data))

    return Tensor._from_op(out_data, (a,), backward)


# reductions and reshaping -------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return Tensor._from_op(np.array(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g) / n))

    return Tensor._from_op(np.array(a.data.mean()), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.data.shape

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(old_shape))

    return Tensor._from_op(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.T)

    return Tensor._from_op(a.data.T.copy(), (a,), backward)


def narrow(a: Tensor, key) -> Tensor:
    """Differentiable basic slicing (ints, slices, tuples thereof)."""
    out_data = np.array(a.data[key])

    def backward(g: Array) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = g
            a._accumulate(buf)

    return Tensor._from_op(out_data, (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of an empty list")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(parts), backward)


# linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects matrices")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward)


def diagonal(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(f"diagonal expects a square matrix, got {a.shape}")
    n = a.data.shape[0]

    def backward(g: Array) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[np.arange(n), np.arange(n)] = g
            a._accumulate(buf)

    return Tensor._from_op(np.diag(a.data).copy(), (a,), backward)


def row_scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of matrix ``a`` by ``s[i]``."""
    if a.data.ndim != 2 or s.data.ndim != 1 or a.data.shape[0] != s.data.shape[0]:
        raise DimensionError(f"row_scale shapes: {a.shape} vs {s.shape}")
    out_data = a.data * s.data[:, None]

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * s.data[:, None])
        if s.requires_grad:
            s._accumulate((g * a.data).sum(axis=1))

    return Tensor._from_op(out_data, (a, s), backward)


def col_scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply column ``j`` of matrix ``a`` by ``s[j]``."""
    if a.data.ndim != 2 or s.data.ndim != 1 or a.data.shape[1] != s.data.shape[0]:
        raise DimensionError(f"col_scale shapes: {a.shape} vs {s.shape}")
    out_data = a.data * s.data[None, :]

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * s.data[None, :])
        if s.requires_grad:
            s._accumulate((g * a.data).sum(axis=0))

    return Tensor._from_op(out_data, (a, s), backward)


# convolution and pooling ---------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 and stride 1 or 2.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernels`` is
    (C_out, C_in, 3, 3).  The output spatial size is ceil(H/stride).
    """
    if stride not in (1, 2):
        raise DimensionError(f"stride must be 1 or 2, got {stride}")
    if kernels.data.ndim != 4 or kernels.data.shape[2:] != (3, 3):
        raise DimensionError(f"kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 3D or 4D, got shape {x.shape}")
    n, c_in, h, w = xd.shape
    c_out = kernels.data.shape[0]
    if kernels.data.shape[1] != c_in:
        raise DimensionError(f"channel mismatch: input {c_in}, kernels expect {kernels.data.shape[1]}")
    if h < 3 or w < 3:
        raise DimensionError(f"spatial size must be at least 3x3, got {h}x{w}")

    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    padded = np.zeros((n, c_in, h + 2, w + 2))
    padded[:, :, 1:-1, 1:-1] = xd

    # (n, c_in, h_out, w_out, 3, 3) window view, strided
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out * w_out, c_in * 9)
    kmat = kernels.data.reshape(c_out, c_in * 9)
    out = (cols @ kmat.T).transpose(0, 2, 1).reshape(n, c_out, h_out, w_out)

    def backward(g: Array) -> None:
        gd = g[None] if squeeze else g
        gcols = gd.reshape(n, c_out, h_out * w_out).transpose(0, 2, 1)  # (n, P, c_out)
        if kernels.requires_grad:
            gk = np.einsum("npo,npk->ok", gcols, cols)
            kernels._accumulate(gk.reshape(c_out, c_in, 3, 3))
        if x.requires_grad:
            dcols = gcols @ kmat  # (n, P, c_in*9)
            dwin = dcols.reshape(n, h_out, w_out, c_in, 3, 3).transpose(0, 3, 1, 2, 4, 5)
            dpad = np.zeros_like(padded)
            for di in range(3):
                for dj in range(3):
                    dpad[:, :, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride] += dwin[:, :, :, :, di, dj]
            dx = dpad[:, :, 1:-1, 1:-1]
            x._accumulate(dx[0] if squeeze else dx)

    out_data = out[0] if squeeze else out
    return Tensor._from_op(out_data, (x, kernels), backward)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (C,H,W) -> (C,) or (N,C,H,W) -> (N,C)."""
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"spatial_avg_pool expects 3D or 4D input, got {x.shape}")
    h, w = x.data.shape[-2:]
    out_data = x.data.mean(axis=(-2, -1))

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(np.repeat(g, h * w).reshape(x.data.shape) / (h * w))

    return Tensor._from_op(out_data, (x,), backward)


def scale_channels(u: Tensor, g_t: Tensor) -> Tensor:
    """Per-channel gating: channel c of ``u`` is multiplied by ``g[c]``.

    Shapes: (C,H,W) with gates (C,), or (N,C,H,W) with gates (N,C).
    """
    if u.data.ndim == 3 and g_t.data.ndim == 1:
        if u.data.shape[0] != g_t.data.shape[0]:
            raise DimensionError(f"gate length {g_t.shape} != channels {u.shape}")
        gexp = g_t.data[:, None, None]
        axes = (1, 2)
    elif u.data.ndim == 4 and g_t.data.ndim == 2:
        if u.data.shape[:2] != g_t.data.shape:
            raise DimensionError(f"gate shape {g_t.shape} != (N,C) of {u.shape}")
        gexp = g_t.data[:, :, None, None]
        axes = (2, 3)
    else:
        raise DimensionError(f"scale_channels shapes: {u.shape} vs {g_t.shape}")

    def backward(g: Array) -> None:
        if u.requires_grad:
            u._accumulate(g * gexp)
        if g_t.requires_grad:
            g_t._accumulate((g * u.data).sum(axis=axes))

    return Tensor._from_op(u.data * gexp, (u, g_t), backward)


# special nodes -------------------------------------------------------------


def grad_reverse(x: Tensor) -> Tensor:
    """Identity forward; multiplies the incoming gradient by -1."""

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(-g)

    return Tensor._from_op(x.data.copy(), (x,), backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-norm copy of a vector; evaluation-time only (no graph)."""
    if x.data.ndim != 1:
        raise DimensionError(f"l2_normalize expects a vector, got {x.shape}")
    norm = float(np.linalg.norm(x.data))
    if norm <= _NORM_EPS:
        raise DegenerateVectorError(f"cannot normalize vector with norm {norm:.3e}")
    return Tensor(x.data / norm)


# finite-difference checking -------------------------------------------------


def gradient_check(build, tensors, h: float = 1e-5, rel_tol: float = 1e-4,
                   abs_floor: float = 1e-7, max_coords: int | None = None,
                   rng: np.random.Generator | None = None,
                   raise_on_fail: bool = True) -> float:
    """Compare analytic gradients of ``build()`` against central differences.

    ``build`` must return a scalar Tensor computed from ``tensors``
    (which all need ``requires_grad=True``).  Returns the maximum
    relative error over the checked coordinates and raises
    ``AssertionError`` if it exceeds ``rel_tol``.  ``max_coords`` caps
    the number of coordinates probed per tensor (seeded subsample).
    """
    for t in tensors:
        t.zero_grad()
    out = build()
    out.backward()
    analytic = [np.array(t.grad, copy=True) if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(build().data)
            flat[i] = orig - h
            f_minus = float(build().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(ga_flat[i]), abs(numeric), abs_floor)
            err = abs(ga_flat[i] - numeric) / denom
            worst = max(worst, err)
    if raise_on_fail and worst >= rel_tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} >= {rel_tol:.1e}")
    return worst
