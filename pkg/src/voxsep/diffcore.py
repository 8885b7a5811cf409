"""Differentiable building blocks with reverse-mode gradients and Adam.

Feature maps are plain numpy arrays laid out as (freq, time, channels), with
an optional leading batch axis; every public op accepts both 3-D and 4-D
inputs. Ops take arrays or :class:`Node` operands. When at least one operand
is a Node the op is recorded and :func:`backward` can later propagate exact
vector-Jacobian products; with plain arrays the same code just computes the
forward value.

Activations follow the dtype of their inputs (float32 for the fast training
profile, float64 for verification); gradients at parameter leaves are always
accumulated in float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "LayerParams",
    "AdamState",
    "leaf",
    "backward",
    "grad_of",
    "conv2d_valid",
    "conv2d_transposed",
    "maxpool2",
    "relu",
    "leaky_relu",
    "sigmoid",
    "center_crop",
    "crop_to_bins",
    "concat_channels",
    "clip_values",
    "add",
    "multiply",
    "power",
    "log",
    "exp",
    "mean_all",
    "sum_all",
    "adam_step",
]


class Node:
    """A recorded value in the computation graph.

    ``parents`` pairs each upstream node with the vector-Jacobian product
    mapping this node's gradient to that parent's gradient contribution.
    """

    __slots__ = ("value", "parents", "requires_grad", "grad")

    def __init__(self, value, parents=(), requires_grad=None):
        self.value = value
        self.parents = parents
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    # -- arithmetic sugar (scalars and same-or-broadcastable shapes) --------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(other, -1.0))

    def __rsub__(self, other):
        return add(multiply(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return multiply(self, power(other, -1))
        return multiply(self, 1.0 / other)


def leaf(value, requires_grad: bool = True) -> Node:
    """Wrap an array as a graph input (a parameter when requires_grad)."""
    return Node(np.asarray(value), parents=(), requires_grad=requires_grad)


def _value(x):
    return x.value if isinstance(x, Node) else x


def _is_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _make(value, builders):
    """Return a bare value, or a Node wired to the Node operands in builders.

    ``builders`` is an iterable of (operand, vjp) pairs; non-Node operands are
    constants and dropped.
    """
    parents = tuple((op, vjp) for op, vjp in builders if isinstance(op, Node))
    if not parents:
        return value
    return Node(value, parents=parents)


def backward(loss) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``grad`` on every node
    that requires a gradient. Fails if no forward pass was recorded."""
    if not isinstance(loss, Node):
        raise TypeError("backward requires a recorded forward pass (got a plain value)")
    if np.ndim(loss.value) != 0:
        raise ValueError("backward expects a scalar loss")

    order: list[Node] = []
    scheduled = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in scheduled:
            continue
        scheduled.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in scheduled and parent.requires_grad:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    loss.grad = np.float64(1.0)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            g = vjp(node.grad)
            if parent.parents:
                parent.grad = g if parent.grad is None else parent.grad + g
            else:
                # parameter leaf: accumulate in 64-bit regardless of activation dtype
                g64 = np.asarray(g, dtype=np.float64)
                parent.grad = g64 if parent.grad is None else parent.grad + g64


def grad_of(node: Node) -> np.ndarray:
    """Gradient collected by the last backward pass, zeros if untouched."""
    if node.grad is None:
        return np.zeros_like(np.asarray(node.value, dtype=np.float64))
    return np.asarray(node.grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _batched(x):
    """View a (F,T,C) operand as (1,F,T,C); report whether it was unbatched."""
    v = _value(x)
    if v.ndim == 3:
        return _reshape(x, (1,) + v.shape), True
    if v.ndim == 4:
        return x, False
    raise ValueError(f"expected a 3-D or 4-D feature map, got shape {v.shape}")


def _debatch(y, was3d):
    if not was3d:
        return y
    v = _value(y)
    return _reshape(y, v.shape[1:])


def _reshape(x, shape):
    v = _value(x)
    out = v.reshape(shape)
    if not isinstance(x, Node):
        return out
    old_shape = v.shape
    return _make(out, [(x, lambda g: g.reshape(old_shape))])


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops and reductions
# ---------------------------------------------------------------------------


def add(a, b):
    va, vb = _value(a), _value(b)
    out = va + vb
    sa, sb = np.shape(va), np.shape(vb)
    return _make(out, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])


def multiply(a, b):
    va, vb = _value(a), _value(b)
    out = va * vb
    sa, sb = np.shape(va), np.shape(vb)
    return _make(
        out,
        [(a, lambda g: _unbroadcast(g * vb, sa)), (b, lambda g: _unbroadcast(g * va, sb))],
    )


def power(x, p):
    v = _value(x)
    out = v**p
    return _make(out, [(x, lambda g: g * p * v ** (p - 1))])


def log(x):
    v = _value(x)
    out = np.log(v)
    return _make(out, [(x, lambda g: g / v)])


def clip_values(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes only through unclipped entries."""
    v = _value(x)
    out = np.clip(v, lo, hi)
    inside = (v >= lo) & (v <= hi)
    return _make(out, [(x, lambda g: g * inside)])


def relu(x):
    v = _value(x)
    out = np.maximum(v, 0)
    pos = v > 0
    return _make(out, [(x, lambda g: g * pos)])


def leaky_relu(x, slope: float = 0.01):
    v = _value(x)
    out = np.where(v > 0, v, slope * v)
    return _make(out, [(x, lambda g: g * np.where(v > 0, 1.0, slope).astype(g.dtype))])


def sigmoid(x):
    v = _value(x)
    z = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(v.dtype)
    return _make(out, [(x, lambda g: g * out * (1.0 - out))])


def mean_all(x):
    # reductions compute in float64; the outgoing gradient follows the
    # activation dtype so float32 graphs stay on the fast path
    v = _value(x)
    out = v.mean(dtype=np.float64)
    shape, size, dt = v.shape, v.size, v.dtype
    return _make(out, [(x, lambda g: np.full(shape, g / size, dtype=dt))])


def sum_all(x):
    v = _value(x)
    out = v.sum(dtype=np.float64)
    shape, dt = v.shape, v.dtype
    return _make(out, [(x, lambda g: np.full(shape, g, dtype=dt))])


def exp(x):
    v = _value(x)
    out = np.exp(v)
    return _make(out, [(x, lambda g: g * out)])


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------


@dataclass
class LayerParams:
    """Named kernel/bias pair: kernel (kh, kw, c_in, c_out), bias (c_out,)."""

    name: str
    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ValueError(f"{self.name}: kernel must be 4-D (kh, kw, c_in, c_out)")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ValueError(f"{self.name}: bias must have one entry per output channel")


def _im2col(v, kh, kw):
    """(B,F,T,C) -> (B*OF*OT, kh*kw*C) patch matrix plus output spatial dims."""
    b, f, t, c = v.shape
    of, ot = f - kh + 1, t - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(v, (kh, kw), axis=(1, 2))
    patches = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * of * ot, kh * kw * c)
    return np.ascontiguousarray(patches), of, ot


def conv2d_valid(x, kernel, bias):
    """Valid 2-D convolution (cross-correlation convention), bias per channel."""
    xb, was3d = _batched(x)
    v = _value(xb)
    kv, bv = _value(kernel), _value(bias)
    kh, kw, cin, cout = kv.shape
    b, f, t, c = v.shape
    if c != cin:
        raise ValueError(f"conv2d_valid: input has {c} channels, kernel expects {cin}")
    if f < kh or t < kw:
        raise ValueError(f"conv2d_valid: input {f}x{t} smaller than kernel {kh}x{kw}")

    patches, of, ot = _im2col(v, kh, kw)
    out2 = patches @ kv.reshape(kh * kw * cin, cout)
    out2 += bv
    out = out2.reshape(b, f - kh + 1, t - kw + 1, cout)

    def vjp_x(g):
        g4 = g.reshape(b, of, ot, cout)
        padded = np.pad(g4, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        gp, _, _ = _im2col(padded, kh, kw)
        flipped = kv[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
        return (gp @ flipped).reshape(b, f, t, cin)

    def vjp_k(g):
        g2 = g.reshape(b * of * ot, cout)
        return (patches.T @ g2).reshape(kh, kw, cin, cout)

    def vjp_b(g):
        return g.reshape(-1, cout).sum(axis=0)

    y = _make(out, [(xb, vjp_x), (kernel, vjp_k), (bias, vjp_b)])
    return _debatch(y, was3d)


def conv2d_transposed(x, kernel, bias, stride=(1, 1)):
    """Adjoint of a strided valid convolution.

    Output spatial dims: (F-1)*sH + kH by (T-1)*sW + kW.
    """
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise ValueError("stride entries must be >= 1")
    xb, was3d = _batched(x)
    v = _value(xb)
    kv, bv = _value(kernel), _value(bias)
    kh, kw, cin, cout = kv.shape
    b, f, t, c = v.shape
    if c != cin:
        raise ValueError(f"conv2d_transposed: input has {c} channels, kernel expects {cin}")

    of, ot = (f - 1) * sh + kh, (t - 1) * sw + kw
    x2 = v.reshape(b * f * t, cin)
    out = np.zeros((b, of, ot, cout), dtype=np.result_type(v, kv))
    for i in range(kh):
        for j in range(kw):
            contrib = (x2 @ kv[i, j]).reshape(b, f, t, cout)
            out[:, i : i + (f - 1) * sh + 1 : sh, j : j + (t - 1) * sw + 1 : sw, :] += contrib
    out += bv

    def vjp_x(g):
        acc = np.zeros((b * f * t, cin), dtype=np.result_type(g, kv))
        for i in range(kh):
            for j in range(kw):
                gs = g[:, i : i + (f - 1) * sh + 1 : sh, j : j + (t - 1) * sw + 1 : sw, :]
                acc += np.ascontiguousarray(gs).reshape(b * f * t, cout) @ kv[i, j].T
        return acc.reshape(b, f, t, cin)

    def vjp_k(g):
        dk = np.empty_like(kv, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gs = g[:, i : i + (f - 1) * sh + 1 : sh, j : j + (t - 1) * sw + 1 : sw, :]
                dk[i, j] = x2.T @ gs.reshape(b * f * t, cout)
        return dk

    def vjp_b(g):
        return g.reshape(-1, cout).sum(axis=0)

    y = _make(out, [(xb, vjp_x), (kernel, vjp_k), (bias, vjp_b)])
    return _debatch(y, was3d)


def maxpool2(x):
    """2x2 max-pooling with stride 2; odd trailing rows/columns are dropped."""
    xb, was3d = _batched(x)
    v = _value(xb)
    b, f, t, c = v.shape
    f2, t2 = f // 2, t // 2
    vc = v[:, : 2 * f2, : 2 * t2, :]
    stacked = (
        vc.reshape(b, f2, 2, t2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, f2, t2, c, 4)
    )
    arg = stacked.argmax(axis=-1)
    out = np.take_along_axis(stacked, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        scat = np.zeros((b, f2, t2, c, 4), dtype=g.dtype)
        np.put_along_axis(scat, arg[..., None], g[..., None], axis=-1)
        grad = scat.reshape(b, f2, t2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(
            b, 2 * f2, 2 * t2, c
        )
        if (f, t) != (2 * f2, 2 * t2):
            grad = np.pad(grad, ((0, 0), (0, f - 2 * f2), (0, t - 2 * t2), (0, 0)))
        return grad

    y = _make(out, [(xb, vjp)])
    return _debatch(y, was3d)


def _slice_spatial(x, fs: slice, ts: slice):
    xb, was3d = _batched(x)
    v = _value(xb)
    out = v[:, fs, ts, :]
    shape = v.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, fs, ts, :] = g
        return full

    y = _make(out, [(xb, vjp)])
    return _debatch(y, was3d)


def center_crop(x, target_f: int, target_t: int):
    """Spatially centered crop; odd parity drops the extra high-index cell."""
    v = _value(x)
    f, t = (v.shape[1], v.shape[2]) if v.ndim == 4 else (v.shape[0], v.shape[1])
    if target_f > f or target_t > t:
        raise ValueError(f"cannot crop {f}x{t} up to {target_f}x{target_t}")
    off_f = (f - target_f) // 2
    off_t = (t - target_t) // 2
    return _slice_spatial(x, slice(off_f, off_f + target_f), slice(off_t, off_t + target_t))


def crop_to_bins(x, bins: int):
    """Keep the lowest `bins` frequency rows (discard high-frequency excess)."""
    return _slice_spatial(x, slice(0, bins), slice(None))


def concat_channels(a, b):
    """Concatenate two feature maps along the channel axis."""
    ab, was3d_a = _batched(a)
    bb, was3d_b = _batched(b)
    if was3d_a != was3d_b:
        raise ValueError("concat_channels operands must both be batched or both not")
    va, vb = _value(ab), _value(bb)
    if va.shape[:3] != vb.shape[:3]:
        raise ValueError(f"concat_channels: spatial mismatch {va.shape} vs {vb.shape}")
    ca = va.shape[3]
    out = np.concatenate([va, vb], axis=3)
    y = _make(
        out,
        [(ab, lambda g: g[..., :ca]), (bb, lambda g: g[..., ca:])],
    )
    return _debatch(y, was3d_a)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Optimizer state: per-parameter moments in float64 plus step counter."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update with bias correction, applied in place.

    ``params`` maps names to arrays (any float dtype); ``grads`` maps the same
    names to float64 gradients. Missing gradients are treated as zeros.
    Raises on NaN gradients, naming the offending parameter.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=np.float64)
        else:
            g = np.asarray(g, dtype=np.float64)
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient for parameter {name!r}")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            state.first_moment[name] = m
        v = state.second_moment.get(name)
        if v is None:
            v = np.zeros(p.shape, dtype=np.float64)
            state.second_moment[name] = v
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        np.subtract(p, update.astype(p.dtype, copy=False), out=p, casting="unsafe")
    return params, state
