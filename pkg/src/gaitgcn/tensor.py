"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values live in numpy arrays. Each primitive records its parents and a
vector-Jacobian product closure when any input requires gradients; the
graph formed by those links is walked in reverse topological order by
``Tensor.backward``. There is no global tape, so independent models can
run concurrently.

Design constraints honoured throughout:

* no implicit broadcasting: elementwise ops demand identical shapes, and
  the only shape-mixing primitives are the explicit ``scale``,
  ``add_bias`` and ``scale_channels`` forms;
* double precision is the default dtype (gradient checks depend on it);
* forward evaluation is deterministic and side-effect free, except that
  batchnorm in training mode updates its running statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

_CHECKED = False


def set_checked(flag: bool) -> None:
    """Enable rejection of non-finite inputs at every primitive."""
    global _CHECKED
    _CHECKED = bool(flag)


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense N-d array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Must be called on a scalar. Repeated calls without ``zero_grad``
        accumulate into ``grad``.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward: loss must be scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if prev is None else prev + pg

    # -- elementwise / shape methods -------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def scale(self, factor: float) -> "Tensor":
        return scale(self, factor)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axes=None) -> "Tensor":
        return tensor_sum(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return mean(self, axes)

    def max(self, axes=None) -> "Tensor":
        return amax(self, axes)

    def narrow(self, axis: int, start: int, length: int, step: int = 1) -> "Tensor":
        return narrow(self, axis, start, length, step)


def _result(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _check_inputs(op: str, *tensors: Tensor) -> None:
    if not _CHECKED:
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"{op}: non-finite values in input of shape {t.data.shape}")


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# -- arithmetic -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("add", a, b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("multiply", a, b)
    if a.shape != b.shape:
        raise _shape_error("multiply", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    _check_inputs("scale", x)
    factor = float(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-row bias: x is (m,) or (m, n), b is (m,)."""
    _check_inputs("add_bias", x, b)
    if b.data.ndim != 1 or x.data.ndim not in (1, 2) or x.shape[0] != b.shape[0]:
        raise _shape_error("add_bias", x.shape, b.shape)
    if x.data.ndim == 1:
        return _result(x.data + b.data, (x, b), lambda g: (g, g))
    return _result(x.data + b.data[:, None], (x, b),
                   lambda g: (g, g.sum(axis=1)))


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply x by a per-leading-axis gate: x is (C, ...), gate is (C,)."""
    _check_inputs("scale_channels", x, gate)
    if gate.data.ndim != 1 or x.data.ndim < 1 or x.shape[0] != gate.shape[0]:
        raise _shape_error("scale_channels", x.shape, gate.shape)
    expand = (slice(None),) + (None,) * (x.data.ndim - 1)
    gd = gate.data[expand]
    xd = x.data

    def vjp(g):
        axes = tuple(range(1, xd.ndim))
        return g * gd, (g * xd).sum(axis=axes)

    return _result(xd * gd, (x, gate), vjp)


def relu(x: Tensor) -> Tensor:
    _check_inputs("relu", x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _check_inputs("sigmoid", x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports (m,k)@(k,n) and (m,k)@(k,)."""
    _check_inputs("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise _shape_error("matmul", ad.shape, bd.shape)
    if bd.ndim == 1:
        return _result(ad @ bd, (a, b),
                       lambda g: (np.outer(g, bd), ad.T @ g))
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (B,m,k)@(B,k,n)."""
    _check_inputs("bmm", a, b)
    ad, bd = a.data, b.data
    if (ad.ndim != 3 or bd.ndim != 3 or ad.shape[0] != bd.shape[0]
            or ad.shape[2] != bd.shape[1]):
        raise _shape_error("batched-matmul", ad.shape, bd.shape)
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ bd.transpose(0, 2, 1),
                              ad.transpose(0, 2, 1) @ g))


def conv2d(x: Tensor, w: Tensor, stride=(1, 1), dilation=(1, 1),
           padding=(0, 0)) -> Tensor:
    """2D convolution of (N,C,H,W) input with (F,C,KH,KW) filters."""
    _check_inputs("conv2d", x, w)
    stride = (int(stride[0]), int(stride[1]))
    dilation = (int(dilation[0]), int(dilation[1]))
    padding = (int(padding[0]), int(padding[1]))
    if min(stride) < 1 or min(dilation) < 1 or min(padding) < 0:
        raise ValueError(f"conv2d: invalid stride/dilation/padding "
                         f"{stride}/{dilation}/{padding}")
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise _shape_error("conv2d", xd.shape, wd.shape)
    n, f, ho, wo = kernels.conv2d_output_shape(xd.shape, wd.shape, stride,
                                               dilation, padding)
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", xd.shape, wd.shape)
    out = kernels.conv2d_forward(xd, wd, stride, dilation, padding)

    def vjp(g):
        return kernels.conv2d_backward(xd, wd, g, stride, dilation, padding)

    return _result(out, (x, w), vjp)


# -- reductions -----------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def tensor_sum(x: Tensor, axes=None) -> Tensor:
    _check_inputs("sum", x)
    axes = _norm_axes(axes, x.data.ndim)
    xd = x.data

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), xd.shape).copy(),)

    return _result(xd.sum(axis=axes), (x,), vjp)


def mean(x: Tensor, axes=None) -> Tensor:
    _check_inputs("mean-over-axes", x)
    axes = _norm_axes(axes, x.data.ndim)
    xd = x.data
    count = int(np.prod([xd.shape[a] for a in axes])) if axes else 1

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), xd.shape).copy() / count,)

    return _result(xd.mean(axis=axes), (x,), vjp)


def amax(x: Tensor, axes=None) -> Tensor:
    """Max over axes; gradient routes to the first maximal position."""
    _check_inputs("max-over-axes", x)
    axes = _norm_axes(axes, x.data.ndim)
    xd = x.data
    kept = tuple(a for a in range(xd.ndim) if a not in axes)
    moved = np.transpose(xd, kept + axes)
    flat = moved.reshape(moved.shape[:len(kept)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gm = gf.reshape(moved.shape)
        inv = np.argsort(kept + axes)
        return (np.transpose(gm, inv),)

    return _result(out, (x,), vjp)


# -- shape manipulation ---------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    _check_inputs("reshape", x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise _shape_error("reshape", x.shape, shape)
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    _check_inputs("transpose", x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise _shape_error("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _check_inputs("concat", *tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    datas = [t.data for t in tensors]
    ndim = datas[0].ndim
    axis = axis % ndim
    for d in datas[1:]:
        if d.ndim != ndim or any(d.shape[i] != datas[0].shape[i]
                                 for i in range(ndim) if i != axis):
            raise _shape_error("concat", datas[0].shape, d.shape)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    out = Tensor(np.concatenate(datas, axis=axis))
    if any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._parents = tuple(tensors)
        out._vjp = vjp
    return out


def narrow(x: Tensor, axis: int, start: int, length: int, step: int = 1) -> Tensor:
    """Strided slice along one axis; gradient scatters back with zeros."""
    _check_inputs("narrow", x)
    ndim = x.data.ndim
    axis = axis % ndim
    stop = start + (length - 1) * step + 1
    if start < 0 or length < 1 or step < 1 or stop > x.data.shape[axis]:
        raise ValueError(f"narrow: slice (start={start}, length={length}, "
                         f"step={step}) out of range for shape {x.shape} axis {axis}")
    index = (slice(None),) * axis + (slice(start, stop, step),)
    xd = x.data

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[index] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), vjp)


def window_stack(x: Tensor, tau: int, dilation: int = 1) -> Tensor:
    """Stack a centered temporal window around every frame.

    Input (C, T, V) becomes (C, T, tau, V) where slot i holds the frame at
    offset ``dilation * (i - (tau-1)/2)``, zero-padded at the boundaries.
    """
    _check_inputs("window-stack", x)
    if x.data.ndim != 3:
        raise _shape_error("window-stack", x.shape, (tau,))
    if tau < 1 or tau % 2 == 0:
        raise ValueError(f"window-stack: window size must be odd and >= 1, got {tau}")
    if dilation < 1:
        raise ValueError(f"window-stack: dilation must be >= 1, got {dilation}")
    c, t, v = x.data.shape
    half = (tau - 1) // 2
    pad = half * dilation
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.empty((c, t, tau, v), dtype=x.data.dtype)
    for i in range(tau):
        out[:, :, i, :] = xp[:, i * dilation : i * dilation + t, :]

    def vjp(g):
        gxp = np.zeros_like(xp)
        for i in range(tau):
            gxp[:, i * dilation : i * dilation + t, :] += g[:, :, i, :]
        return (gxp[:, pad : pad + t, :],)

    return _result(out, (x,), vjp)


# -- normalization and loss ----------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer."""
    mean: np.ndarray
    var: np.ndarray
    updates: int = field(default=0)

    @classmethod
    def initial(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel normalization over all non-leading axes of x.

    Training mode normalizes with the statistics of the current tensor and
    folds them into ``state`` with the given momentum; evaluation mode uses
    the running statistics and has no side effects.
    """
    _check_inputs("batchnorm", x, gamma, beta)
    xd = x.data
    c = xd.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise _shape_error("batchnorm", xd.shape, gamma.shape)
    axes = tuple(range(1, xd.ndim))
    expand = (slice(None),) + (None,) * (xd.ndim - 1)
    n = int(np.prod([xd.shape[a] for a in axes])) if axes else 1
    gd, bd = gamma.data, beta.data

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.mean = (1.0 - momentum) * state.mean + momentum * mu
        state.var = (1.0 - momentum) * state.var + momentum * unbiased
        state.updates += 1
    else:
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[expand]) * inv_std[expand]
    out = gd[expand] * xhat + bd[expand]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd[expand]
        if not training:
            return dxhat * inv_std[expand], dgamma, dbeta
        centered = xd - mu[expand]
        dvar = (dxhat * centered).sum(axis=axes) * (-0.5) * inv_std ** 3
        dmu = (-dxhat.sum(axis=axes) * inv_std
               + dvar * (-2.0 / n) * centered.sum(axis=axes))
        dx = (dxhat * inv_std[expand]
              + dvar[expand] * 2.0 * centered / n
              + dmu[expand] / n)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), vjp)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of softmax(logits) against an integer class label."""
    _check_inputs("softmax-cross-entropy", logits)
    ld = logits.data
    if ld.ndim != 1:
        raise _shape_error("softmax-cross-entropy", ld.shape, ("n",))
    label = int(label)
    if not 0 <= label < ld.shape[0]:
        raise ValueError(f"softmax-cross-entropy: label {label} out of range "
                         f"for {ld.shape[0]} classes")
    shifted = ld - ld.max()
    lse = np.log(np.exp(shifted).sum())
    loss = lse - shifted[label]
    probs = np.exp(shifted - lse)

    def vjp(g):
        d = probs.copy()
        d[label] -= 1.0
        return (d * g,)

    return _result(np.asarray(loss), (logits,), vjp)


# -- generic dispatch ------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "batched-matmul": bmm,
    "conv2d": conv2d,
    "add": add,
    "multiply": multiply,
    "scale": scale,
    "add-bias": add_bias,
    "scale-channels": scale_channels,
    "relu": relu,
    "sigmoid": sigmoid,
    "batchnorm": batchnorm,
    "sum": tensor_sum,
    "mean-over-axes": mean,
    "max-over-axes": amax,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "narrow": narrow,
    "window-stack": window_stack,
    "softmax-cross-entropy": softmax_cross_entropy,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Apply a primitive by name; inputs precede op-specific parameters."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **params)
    return fn(*inputs, **params)


# -- gradient verification -------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            epsilon: float = 1e-5) -> float:
    """Compare the analytic gradient of scalar-valued f at x against central
    differences and return the max relative error over coordinates.

    The relative error at coordinate i is |analytic - numeric| divided by
    max(1, |analytic|). f is probed twice at the base point; differing
    values mean it is not deterministic and the check is rejected.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")

    base = np.array(x.data, dtype=np.float64)
    v1 = f(Tensor(base.copy())).data
    v2 = f(Tensor(base.copy())).data
    if not np.array_equal(v1, v2):
        raise ValueError("finite_difference_check: f is not deterministic "
                         "(two evaluations at the base point differ)")
    if v1.size != 1:
        raise ValueError("finite_difference_check: f must return a scalar")

    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad
    if analytic is None:
        analytic = np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - epsilon
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * epsilon)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
