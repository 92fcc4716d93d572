"""Minimal reverse-mode differentiation tape.

A :class:`Tape` records primitive applications in construction order, which
is automatically a topological order: a node can only be built from nodes
that already exist. ``backward`` sweeps the list in reverse, accumulating
adjoints; leaves created from trainable :class:`Parameter` objects copy their
adjoint into ``Parameter.grad``.

The primitive set is intentionally small -- exactly what the adapters, the
frozen transformer host, and the training losses need. Broadcasting is
restricted to scalar-with-tensor and trailing-channel-vector-with-tensor;
any other shape mix raises. Adjoint branches that cannot reach a trainable
leaf are skipped (``needs_grad`` propagation), so frozen host weights cost
nothing in the backward pass and provably receive zero gradient.

Tapes are single-use and single-threaded; rebuild one per training step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import spectral
from .errors import DimensionError, GradCheckError, ParameterError, TapeError

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_GELU_CUBIC = 0.044715


class Parameter:
    """A named tensor with an accumulated gradient.

    Frozen parameters (``trainable=False``) participate in the forward pass
    as constants and never accumulate gradient. ``weight_decay`` marks
    whether the decoupled decay of AdamW applies (filter and low-rank
    matrices yes; router logits and time values no).
    """

    __slots__ = ("name", "value", "grad", "trainable", "weight_decay")

    def __init__(self, name, value, trainable=True, weight_decay=True):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.weight_decay = weight_decay

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "value", "adjoint", "needs_grad", "_backward", "_index")

    def __init__(self, tape, value, needs_grad, backward, index):
        self.tape = tape
        self.value = value
        self.adjoint = None
        self.needs_grad = needs_grad
        self._backward = backward
        self._index = index

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications with reverse-sweep backward."""

    def __init__(self):
        self._nodes = []
        self._watched = []
        self._done = False

    def _record(self, value, needs_grad=False, backward=None):
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        node = Node(self, value, needs_grad, backward, len(self._nodes))
        self._nodes.append(node)
        return node

    def constant(self, value):
        """A leaf the backward pass ignores."""
        return self._record(value)

    def param(self, p: Parameter):
        """Watch a parameter; trainable ones receive gradient after backward."""
        node = self._record(p.value, needs_grad=p.trainable)
        if p.trainable:
            self._watched.append((p, node))
        return node

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Node):
        """Accumulate adjoints of everything `root` depends on.

        `root` must be a scalar recorded on this tape. Watched trainable
        parameters receive ``grad += adjoint``. A tape can run backward once.
        """
        if not self._nodes:
            raise TapeError("backward before any forward value was recorded")
        if not isinstance(root, Node) or root.tape is not self:
            raise TapeError("backward root was not recorded on this tape")
        if root.value.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.value.shape}")
        if self._done:
            raise TapeError("tape already ran backward; rebuild it")
        self._done = True
        root.adjoint = np.ones_like(root.value)
        for node in reversed(self._nodes[: root._index + 1]):
            if node.adjoint is None or node._backward is None:
                continue
            node._backward(node.adjoint)
        for p, node in self._watched:
            if node.adjoint is not None:
                p.grad += np.asarray(node.adjoint).reshape(p.grad.shape)


def _acc(node, arr):
    # Out-of-place accumulation: stored adjoints may alias upstream buffers,
    # which is safe only because nothing mutates them in place.
    node.adjoint = arr if node.adjoint is None else node.adjoint + arr


def _same_tape(*nodes):
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise TapeError("operands were recorded on different tapes")
    return tape


def _is_scalar_shape(shape):
    return math.prod(shape) == 1


def _check_broadcast(sa, sb):
    if sa == sb or _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return
    if len(sa) == 1 and len(sb) > 1 and sb[-1] == sa[0]:
        return
    if len(sb) == 1 and len(sa) > 1 and sa[-1] == sb[0]:
        return
    raise DimensionError(f"unsupported broadcast between shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _check_broadcast(a.shape, b.shape)
    out = tape._record(a.value + b.value, a.needs_grad or b.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def sub(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _check_broadcast(a.shape, b.shape)
    out = tape._record(a.value - b.value, a.needs_grad or b.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(-g, b.shape))

    out._backward = _bw
    return out


def neg(a: Node) -> Node:
    out = a.tape._record(-a.value, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, -g)

    out._backward = _bw
    return out


def mul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _check_broadcast(a.shape, b.shape)
    out = tape._record(a.value * b.value, a.needs_grad or b.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, _unbroadcast(g * b.value, a.shape))
        if b.needs_grad:
            _acc(b, _unbroadcast(g * a.value, b.shape))

    out._backward = _bw
    return out


def scale(a: Node, s: float) -> Node:
    """Multiply by a non-differentiable python scalar."""
    out = a.tape._record(a.value * s, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, g * s)

    out._backward = _bw
    return out


def exp(a: Node) -> Node:
    val = np.exp(a.value)
    out = a.tape._record(val, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, g * val)

    out._backward = _bw
    return out


def cos(a: Node) -> Node:
    out = a.tape._record(np.cos(a.value), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, -g * np.sin(a.value))

    out._backward = _bw
    return out


def log(a: Node) -> Node:
    out = a.tape._record(np.log(a.value), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, g / a.value)

    out._backward = _bw
    return out


def reciprocal_offset(a: Node, eta: float) -> Node:
    """1 / (a + eta)."""
    val = 1.0 / (a.value + eta)
    out = a.tape._record(val, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, -g * val * val)

    out._backward = _bw
    return out


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.ndim != b.value.ndim or a.value.ndim not in (2, 3):
        raise DimensionError(
            f"matmul expects two 2D or two 3D operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2] or (a.value.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"incompatible matmul shapes {a.shape} @ {b.shape}")
    out = tape._record(a.value @ b.value, a.needs_grad or b.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, g @ b.value.swapaxes(-1, -2))
        if b.needs_grad:
            _acc(b, a.value.swapaxes(-1, -2) @ g)

    out._backward = _bw
    return out


def transpose(a: Node, axes) -> Node:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.tape._record(a.value.transpose(axes), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, g.transpose(inv))

    out._backward = _bw
    return out


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    orig = a.shape
    out = a.tape._record(a.value.reshape(shape), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, g.reshape(orig))

    out._backward = _bw
    return out


def select(a: Node, i: int) -> Node:
    """Pick one entry of a 1D vector as a scalar node."""
    if a.value.ndim != 1:
        raise DimensionError(f"select expects a 1D vector, got shape {a.shape}")
    out = a.tape._record(a.value[i], a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            z = np.zeros_like(a.value)
            z[i] = g
            _acc(a, z)

    out._backward = _bw
    return out


def sum_all(a: Node) -> Node:
    out = a.tape._record(np.sum(a.value), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, np.broadcast_to(g, a.shape))

    out._backward = _bw
    return out


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = a.tape._record(np.sum(a.value) / n, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, np.broadcast_to(g / n, a.shape))

    out._backward = _bw
    return out


def softmax(a: Node) -> Node:
    """Stabilized softmax over the last axis."""
    z = a.value - np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(z)
    val = e / np.sum(e, axis=-1, keepdims=True)
    out = a.tape._record(val, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, val * (g - np.sum(g * val, axis=-1, keepdims=True)))

    out._backward = _bw
    return out


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize over the last axis, then apply per-channel gain and bias."""
    tape = _same_tape(x, gain, bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}"
        )
    mu = np.mean(x.value, axis=-1, keepdims=True)
    centered = x.value - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = tape._record(
        xhat * gain.value + bias.value,
        x.needs_grad or gain.needs_grad or bias.needs_grad,
    )

    def _bw(g):
        if gain.needs_grad:
            _acc(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.needs_grad:
            _acc(bias, g.reshape(-1, n).sum(axis=0))
        if x.needs_grad:
            dxhat = g * gain.value
            m1 = np.mean(dxhat, axis=-1, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
            _acc(x, inv * (dxhat - m1 - xhat * m2))

    out._backward = _bw
    return out


def gelu(a: Node) -> Node:
    """GELU with the tanh approximation and its exact derivative."""
    x = a.value
    sq = x * x
    th = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_CUBIC * sq * x))
    half_one_plus = 0.5 * (1.0 + th)
    out = a.tape._record(x * half_one_plus, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * sq)
            _acc(a, g * (half_one_plus + 0.5 * x * (1.0 - th * th) * du))

    out._backward = _bw
    return out


def dct2d(a: Node) -> Node:
    """Orthonormal forward transform; its backward is the inverse transform."""
    if a.value.ndim != 3:
        raise DimensionError(f"dct2d expects a (w, h, c) node, got shape {a.shape}")
    out = a.tape._record(spectral.dct2d_raw(a.value), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, spectral.idct2d_raw(g))

    out._backward = _bw
    return out


def idct2d(a: Node) -> Node:
    if a.value.ndim != 3:
        raise DimensionError(f"idct2d expects a (w, h, c) node, got shape {a.shape}")
    out = a.tape._record(spectral.idct2d_raw(a.value), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, spectral.dct2d_raw(g))

    out._backward = _bw
    return out


def expand_heads(a: Node, width: int, height: int, channels: int) -> Node:
    """(tokens, heads) coefficients -> (width, height, channels) tensor.

    Every channel of a head-sized group shares that head's coefficient; the
    backward pass sums adjoints over each group.
    """
    tokens, heads = a.shape
    if tokens != width * height or channels % heads != 0:
        raise DimensionError(
            f"cannot expand {a.shape} coefficients onto {width}x{height}x{channels}"
        )
    per_head = channels // heads
    val = np.repeat(a.value.reshape(width, height, heads), per_head, axis=2)
    out = a.tape._record(val, a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            grouped = g.reshape(width, height, heads, per_head).sum(axis=3)
            _acc(a, grouped.reshape(tokens, heads))

    out._backward = _bw
    return out


def tile_channels(a: Node, reps: int) -> Node:
    """(m,) per-within-head values -> (m * reps,) per-channel vector."""
    if a.value.ndim != 1:
        raise DimensionError(f"tile_channels expects a 1D vector, got shape {a.shape}")
    m = a.shape[0]
    out = a.tape._record(np.tile(a.value, reps), a.needs_grad)

    def _bw(g):
        if a.needs_grad:
            _acc(a, g.reshape(reps, m).sum(axis=0))

    out._backward = _bw
    return out


def heat_filter(k: Node, t: Node, omega_sq: np.ndarray,
                width: int, height: int, channels: int) -> Node:
    """Heat multiplier exp(-K * omega^2 * t) with head-shared K, per-channel t.

    A fused primitive: one node instead of the expand/mul/mul/neg/exp chain,
    with the analytically reduced adjoints (group-summed for k, spatially
    summed for t).
    """
    tokens, heads = k.shape
    tape = _same_tape(k, t)
    if tokens != width * height or channels % heads != 0 or t.shape != (channels,):
        raise DimensionError(
            f"heat_filter shapes k={k.shape}, t={t.shape} do not fit "
            f"{width}x{height}x{channels}"
        )
    per_head = channels // heads
    k_full = np.repeat(k.value.reshape(width, height, heads), per_head, axis=2)
    om = omega_sq[:, :, None]
    filt = np.exp(-k_full * om * t.value)
    out = tape._record(filt, k.needs_grad or t.needs_grad)

    def _bw(g):
        base = g * filt
        if k.needs_grad:
            gk = (-om * t.value) * base
            _acc(k, gk.reshape(width, height, heads, per_head).sum(axis=3)
                     .reshape(tokens, heads))
        if t.needs_grad:
            _acc(t, ((-k_full * om) * base).sum(axis=(0, 1)))

    out._backward = _bw
    return out


def wave_filter(c: Node, t: Node, omega_abs: np.ndarray,
                width: int, height: int, channels: int) -> Node:
    """Wave multiplier cos(C * |omega| * t) with head-shared C, per-channel t."""
    tokens, heads = c.shape
    tape = _same_tape(c, t)
    if tokens != width * height or channels % heads != 0 or t.shape != (channels,):
        raise DimensionError(
            f"wave_filter shapes c={c.shape}, t={t.shape} do not fit "
            f"{width}x{height}x{channels}"
        )
    per_head = channels // heads
    c_full = np.repeat(c.value.reshape(width, height, heads), per_head, axis=2)
    om = omega_abs[:, :, None]
    phase = c_full * om * t.value
    out = tape._record(np.cos(phase), c.needs_grad or t.needs_grad)

    def _bw(g):
        base = -g * np.sin(phase)
        if c.needs_grad:
            gc = (om * t.value) * base
            _acc(c, gc.reshape(width, height, heads, per_head).sum(axis=3)
                     .reshape(tokens, heads))
        if t.needs_grad:
            _acc(t, ((c_full * om) * base).sum(axis=(0, 1)))

    out._backward = _bw
    return out


def poisson_source_field(h1: Node, h2: Node, inv_denom: np.ndarray,
                         width: int, height: int) -> Node:
    """Frequency-domain Poisson term H1 * H2 / (omega^2 + eta).

    ``inv_denom`` is the precomputed (width, height) reciprocal of the
    stabilized denominator; h1 is (tokens, heads), h2 is (channels/heads,).
    """
    tokens, heads = h1.shape
    tape = _same_tape(h1, h2)
    if tokens != width * height or h2.value.ndim != 1:
        raise DimensionError(
            f"poisson_source_field shapes h1={h1.shape}, h2={h2.shape} do not "
            f"fit a {width}x{height} grid"
        )
    per_head = h2.shape[0]
    h1_full = np.repeat(h1.value.reshape(width, height, heads), per_head, axis=2)
    h2_tiled = np.tile(h2.value, heads)
    inv = inv_denom[:, :, None]
    out = tape._record(h1_full * h2_tiled * inv, h1.needs_grad or h2.needs_grad)

    def _bw(g):
        gi = g * inv
        if h1.needs_grad:
            g1 = (gi * h2_tiled).reshape(width, height, heads, per_head).sum(axis=3)
            _acc(h1, g1.reshape(tokens, heads))
        if h2.needs_grad:
            _acc(h2, (gi * h1_full).sum(axis=(0, 1)).reshape(heads, per_head).sum(axis=0))

    out._backward = _bw
    return out


def mse(a: Node, b: Node) -> Node:
    """Mean squared error between two same-shaped tensors."""
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mse operands must match, got {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size
    out = tape._record(np.sum(diff * diff) / n, a.needs_grad or b.needs_grad)

    def _bw(g):
        d = (2.0 / n) * g * diff
        if a.needs_grad:
            _acc(a, d)
        if b.needs_grad:
            _acc(b, -d)

    out._backward = _bw
    return out


@dataclass
class GradCheckResult:
    """Worst relative error overall and per parameter."""

    max_rel_err: float
    per_param: dict


def grad_check(build, params, eps: float = 1e-4, max_coords: int = 64, seed: int = 0):
    """Compare tape gradients against central finite differences.

    ``build`` must deterministically reconstruct the computation and return
    ``(tape, loss_node)`` for the current parameter values. At most
    ``max_coords`` coordinates per parameter are probed (a seeded random
    subsample); relative error is |ad - fd| / max(1e-8, |ad| + |fd|).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ParameterError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    tape, loss = build()
    if loss.value.size != 1 or not np.isfinite(loss.value):
        raise GradCheckError(f"recorded function must be finite scalar, got {loss.value}")
    tape.backward(loss)
    ad = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    per = {}
    for p, a_grad in zip(params, ad):
        size = p.value.size
        if size <= max_coords:
            idxs = np.arange(size)
        else:
            idxs = np.sort(rng.choice(size, size=max_coords, replace=False))
        flat = p.value.reshape(-1)
        a_flat = a_grad.reshape(-1)
        worst = 0.0
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(build()[1].value)
            flat[j] = orig - eps
            f_minus = float(build()[1].value)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(f"non-finite loss while perturbing {p.name}[{j}]")
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(a_flat[j] - fd) / max(1e-8, abs(a_flat[j]) + abs(fd))
            worst = max(worst, rel)
        per[p.name] = worst
    return GradCheckResult(max(per.values(), default=0.0), per)
