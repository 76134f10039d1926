"""Neural layers over the autodiff engine: spatial graph convolution,
multi-branch dilated temporal convolution, the windowed spatio-temporal
graph convolution, the three-gate attention module, and the two-pathway
block that composes them.

Every layer exposes ``forward(x, training=False)``, iterates its learnable
tensors through ``named_parameters`` and its batchnorm running statistics
through ``named_states``. Forward passes share no hidden global state, so
evaluation is reentrant.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tz
from .tensor import BatchNormState, Tensor

ACTIVATIONS = ("relu", "linear")


def _check_activation(kind: str) -> str:
    if kind not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {kind!r}")
    return kind


def _apply_activation(x: Tensor, kind: str) -> Tensor:
    return tz.relu(x) if kind == "relu" else x


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the fan-in scaling rule."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


class Layer:
    """Parameter bookkeeping shared by all layers."""

    @staticmethod
    def _children(container):
        """(suffix, value) pairs for attribute values worth traversing."""
        if isinstance(container, (list, tuple)):
            return [(str(i), v) for i, v in enumerate(container)]
        if isinstance(container, dict):
            return [(str(k), container[k]) for k in sorted(container)]
        return [("", container)]

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            for suffix, item in self._children(value):
                key = f"{prefix}{name}.{suffix}" if suffix else f"{prefix}{name}"
                if isinstance(item, Tensor) and item.requires_grad:
                    yield key, item
                elif isinstance(item, Layer):
                    yield from item.named_parameters(f"{key}.")

    def named_states(self, prefix: str = ""):
        for name, value in vars(self).items():
            for suffix, item in self._children(value):
                key = f"{prefix}{name}.{suffix}" if suffix else f"{prefix}{name}"
                if isinstance(item, BatchNormState):
                    yield key, item
                elif isinstance(item, Layer):
                    yield from item.named_states(f"{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Layer):
    """Dense map along the channel axis: (C_in, N) or (C_in,) -> C_out."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float64,
                 bias: bool = True):
        self.weight = uniform_init(rng, (c_in, c_out), c_in, dtype)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = tz.matmul(tz.transpose(self.weight, (1, 0)), x)
        if self.bias is not None:
            out = tz.add_bias(out, self.bias)
        return out


class BatchNorm(Layer):
    """Per-channel normalization over all trailing axes of one sample."""

    def __init__(self, channels: int, dtype=np.float64, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState.initial(channels)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return tz.batchnorm(x, self.gamma, self.beta, self.state, training,
                            momentum=self.momentum, eps=self.eps)


def _masked_aggregator(base: np.ndarray, mask: Tensor) -> Tensor:
    """D^-1/2 (A + M) D^-1/2 with degrees from A only, M learnable."""
    deg = base.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    normalized = (inv[:, None] * base * inv[None, :]).astype(mask.dtype)
    outer = np.outer(inv, inv).astype(mask.dtype)
    return tz.add(Tensor(normalized), tz.multiply(mask, Tensor(outer)))


def _aggregate_nodes(x: Tensor, agg: Tensor) -> Tensor:
    """Mix the node axis: (C, T, V) x (V, V) -> (C, T, V)."""
    c, t, v = x.shape
    flat = tz.reshape(x, (c * t, v))
    mixed = tz.matmul(flat, tz.transpose(agg, (1, 0)))
    return tz.reshape(mixed, (c, t, v))


def _map_channels(x: Tensor, weight: Tensor) -> Tensor:
    """Mix the channel axis: (C_in, T, V) x (C_in, C_out) -> (C_out, T, V)."""
    c, t, v = x.shape
    flat = tz.reshape(x, (c, t * v))
    mapped = tz.matmul(tz.transpose(weight, (1, 0)), flat)
    return tz.reshape(mapped, (weight.shape[1], t, v))


class SpatialGCN(Layer):
    """Graph convolution over the joint axis, one term per relation scale.

    f_out = act(sum_k  D_k^-1/2 (A_k + M_k) D_k^-1/2  f_in  W_k)
    with every M_k starting at zero so the initial behavior is the pure
    normalized adjacency.
    """

    def __init__(self, c_in: int, c_out: int, adjacencies, rng,
                 dtype=np.float64, activation: str = "relu"):
        if not adjacencies:
            raise ValueError("need at least one adjacency scale")
        self.adjacencies = [np.asarray(a, dtype=np.float64) for a in adjacencies]
        v = self.adjacencies[0].shape[0]
        for a in self.adjacencies:
            if a.shape != (v, v):
                raise ValueError(f"adjacency shapes disagree: {a.shape} vs "
                                 f"({v}, {v})")
        self.num_nodes = v
        self.weights = [uniform_init(rng, (c_in, c_out), c_in, dtype)
                        for _ in self.adjacencies]
        self.masks = [Tensor(np.zeros((v, v), dtype=dtype), requires_grad=True)
                      for _ in self.adjacencies]
        self.activation = _check_activation(activation)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 3 or x.shape[2] != self.num_nodes:
            raise ValueError(f"expected (C, T, {self.num_nodes}) input, "
                             f"got {x.shape}")
        total = None
        for base, mask, weight in zip(self.adjacencies, self.masks, self.weights):
            agg = _masked_aggregator(base, mask)
            term = _map_channels(_aggregate_nodes(x, agg), weight)
            total = term if total is None else tz.add(total, term)
        return _apply_activation(total, self.activation)


class UnifiedSTGC(Layer):
    """Windowed spatio-temporal graph convolution.

    Each frame gathers tau frames spaced by the dilation (zero padded at
    the borders), the tiled (tau V, tau V) aggregator mixes all gathered
    nodes at once, and the center slice of the window is the output for
    that frame. tau=1 reduces exactly to SpatialGCN with the same base.
    """

    def __init__(self, c_in: int, c_out: int, base_adjacency, tau: int,
                 dilation: int, rng, dtype=np.float64,
                 activation: str = "relu"):
        if tau < 1 or tau % 2 == 0:
            raise ValueError(f"window size must be odd and >= 1, got {tau}")
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        base = np.asarray(base_adjacency, dtype=np.float64)
        if base.ndim != 2 or base.shape[0] != base.shape[1]:
            raise ValueError(f"adjacency must be square, got {base.shape}")
        self.num_nodes = base.shape[0]
        self.tau = tau
        self.dilation = dilation
        self.tiled = np.tile(base, (tau, tau))
        n = self.tiled.shape[0]
        self.weight = uniform_init(rng, (c_in, c_out), c_in, dtype)
        self.mask = Tensor(np.zeros((n, n), dtype=dtype), requires_grad=True)
        self.activation = _check_activation(activation)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 3 or x.shape[2] != self.num_nodes:
            raise ValueError(f"expected (C, T, {self.num_nodes}) input, "
                             f"got {x.shape}")
        c, t, v = x.shape
        tau = self.tau
        windows = tz.window_stack(x, tau, self.dilation)        # (C,T,tau,V)
        flat = tz.reshape(windows, (c * t, tau * v))
        # treat (T) as batch: nodes of each window mix through the tiled map
        agg = _masked_aggregator(self.tiled, self.mask)
        mixed = tz.matmul(flat, tz.transpose(agg, (1, 0)))
        mixed = tz.reshape(mixed, (c, t * tau * v))
        mapped = tz.matmul(tz.transpose(self.weight, (1, 0)), mixed)
        mapped = tz.reshape(mapped, (self.weight.shape[1], t, tau, v))
        center = tz.narrow(mapped, 2, (tau - 1) // 2, 1)
        out = tz.reshape(center, (self.weight.shape[1], t, v))
        return _apply_activation(out, self.activation)


class _ConvBranch(Layer):
    """One temporal-conv branch: optional 1x1 bottleneck, then a dilated
    K x 1 temporal convolution (plain strided 1x1 when K == 1)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int,
                 stride: int, rng, dtype=np.float64, bn_eps: float = 1e-5):
        if kernel % 2 == 0:
            raise ValueError(f"temporal kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.dilation = dilation
        self.stride = stride
        if kernel == 1:
            self.reduce = None
            self.reduce_bn = None
            self.conv = uniform_init(rng, (c_out, c_in, 1, 1), c_in, dtype)
        else:
            self.reduce = uniform_init(rng, (c_out, c_in, 1, 1), c_in, dtype)
            self.reduce_bn = BatchNorm(c_out, dtype, eps=bn_eps)
            self.conv = uniform_init(rng, (c_out, c_out, kernel, 1),
                                     c_out * kernel, dtype)
        self.bn = BatchNorm(c_out, dtype, eps=bn_eps)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        c, t, v = x.shape
        h = tz.reshape(x, (1, c, t, v))
        if self.reduce is not None:
            h = tz.conv2d(h, self.reduce)
            h = tz.reshape(h, h.shape[1:])
            h = tz.relu(self.reduce_bn.forward(h, training))
            h = tz.reshape(h, (1,) + h.shape)
        pad = self.dilation * (self.kernel - 1) // 2
        h = tz.conv2d(h, self.conv, stride=(self.stride, 1),
                      dilation=(self.dilation, 1), padding=(pad, 0))
        h = tz.reshape(h, h.shape[1:])
        return self.bn.forward(h, training)


def split_channels(c_out: int, n_branches: int) -> list[int]:
    """Even split with the remainder spread over the leading branches."""
    base = c_out // n_branches
    rem = c_out - base * n_branches
    sizes = [base + (1 if i < rem else 0) for i in range(n_branches)]
    if min(sizes) < 1:
        raise ValueError(f"cannot split {c_out} channels into {n_branches} "
                         "branches")
    return sizes


class TemporalConv(Layer):
    """Multi-branch temporal convolution with a residual shortcut.

    Branches are (kernel, dilation) pairs; each produces a slice of the
    output channels and all share the stride, so their outputs concatenate
    back to c_out at length ceil(T / stride). The shortcut is identity
    when shapes allow, otherwise a strided 1x1 projection with batchnorm.
    """

    def __init__(self, c_in: int, c_out: int, stride: int, rng,
                 dtype=np.float64, branches=((3, 1), (3, 2), (1, 1)),
                 residual: bool = True, bn_eps: float = 1e-5):
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        sizes = split_channels(c_out, len(branches))
        self.branches = [
            _ConvBranch(c_in, size, kernel, dilation, stride, rng, dtype, bn_eps)
            for size, (kernel, dilation) in zip(sizes, branches)
        ]
        self.stride = stride
        self.c_out = c_out
        self.residual = residual
        if residual and (c_in != c_out or stride != 1):
            self.shortcut = uniform_init(rng, (c_out, c_in, 1, 1), c_in, dtype)
            self.shortcut_bn = BatchNorm(c_out, dtype, eps=bn_eps)
        else:
            self.shortcut = None
            self.shortcut_bn = None

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        parts = [b.forward(x, training) for b in self.branches]
        out = parts[0] if len(parts) == 1 else tz.concat(parts, axis=0)
        if not self.residual:
            return out
        if self.shortcut is None:
            res = x
        else:
            c, t, v = x.shape
            res = tz.conv2d(tz.reshape(x, (1, c, t, v)), self.shortcut,
                            stride=(self.stride, 1))
            res = tz.reshape(res, res.shape[1:])
            res = self.shortcut_bn.forward(res, training)
        return tz.add(out, res)


class STCAtt(Layer):
    """Channel and space-time gating, multiplied onto the features.

    The channel gate squeezes (T, V) away, bottlenecks C -> C/r -> C and
    sigmoids. The space-time gate pools each axis away, compresses the
    concatenated (C, V + T) map to C/r channels, then two heads restore C
    for the joint part and the frame part separately; the per-channel gate
    is their outer product, so each channel's map has rank at most 1 and
    all entries lie strictly inside (0, 1).
    """

    MODES = ("stc", "st", "c", "none")

    def __init__(self, channels: int, reduction: int, mode: str, rng,
                 dtype=np.float64):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {mode!r}")
        if channels % reduction != 0:
            raise ValueError(f"channels {channels} not divisible by "
                             f"reduction {reduction}")
        hidden = channels // reduction
        self.mode = mode
        self.channels = channels
        self.fc_squeeze = Linear(channels, hidden, rng, dtype)
        self.fc_excite = Linear(hidden, channels, rng, dtype)
        self.fc_compress = Linear(channels, hidden, rng, dtype)
        self.head_joint = Linear(hidden, channels, rng, dtype)
        self.head_frame = Linear(hidden, channels, rng, dtype)

    def channel_gate(self, x: Tensor) -> Tensor:
        pooled = x.mean(axes=(1, 2))                       # (C,)
        return tz.sigmoid(self.fc_excite.forward(
            tz.relu(self.fc_squeeze.forward(pooled))))

    def st_gate(self, x: Tensor) -> Tensor:
        c, t, v = x.shape
        over_joints = x.mean(axes=(2,))                    # (C, T)
        over_frames = x.mean(axes=(1,))                    # (C, V)
        both = tz.concat([over_frames, over_joints], axis=1)   # (C, V+T)
        z = tz.relu(self.fc_compress.forward(both))        # (C/r, V+T)
        w_joint = tz.sigmoid(self.head_joint.forward(z.narrow(1, 0, v)))
        w_frame = tz.sigmoid(self.head_frame.forward(z.narrow(1, v, t)))
        # per-channel outer product: (C,T,1) @ (C,1,V) -> (C,T,V)
        return tz.bmm(tz.reshape(w_frame, (c, t, 1)),
                      tz.reshape(w_joint, (c, 1, v)))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 3 or x.shape[0] != self.channels:
            raise ValueError(f"expected ({self.channels}, T, V) input, "
                             f"got {x.shape}")
        out = x
        if self.mode in ("stc", "c"):
            out = tz.scale_channels(out, self.channel_gate(x))
        if self.mode in ("stc", "st"):
            out = tz.multiply(out, self.st_gate(x))
        return out


class STGCBlock(Layer):
    """Two parallel pathways summed, activated, then gated.

    The factorized pathway runs the per-frame graph convolution followed
    by the multi-branch temporal convolution (which applies the stride).
    The windowed pathway runs the spatio-temporal convolution at full
    length, keeps every stride-th frame, and renormalizes. Both end at
    (c_out, ceil(T/stride), V).
    """

    def __init__(self, c_in: int, c_out: int, stride: int, adjacencies,
                 g3d_adjacency, rng, dtype=np.float64, tau: int = 3,
                 dilation: int = 1, attention_mode: str = "stc",
                 reduction: int = 4, activation: str = "relu",
                 bn_eps: float = 1e-5, temporal_branches=((3, 1), (3, 2), (1, 1)),
                 temporal_residual: bool = True):
        self.spatial = SpatialGCN(c_in, c_out, adjacencies, rng, dtype,
                                  activation=activation)
        self.temporal = TemporalConv(c_out, c_out, stride, rng, dtype,
                                     branches=temporal_branches,
                                     residual=temporal_residual, bn_eps=bn_eps)
        self.windowed = UnifiedSTGC(c_in, c_out, g3d_adjacency, tau, dilation,
                                    rng, dtype, activation=activation)
        self.windowed_bn = BatchNorm(c_out, dtype, eps=bn_eps)
        if self.spatial.num_nodes != self.windowed.num_nodes:
            raise ValueError(
                f"pathway node counts disagree: {self.spatial.num_nodes} vs "
                f"{self.windowed.num_nodes}")
        self.stride = stride
        self.activation = _check_activation(activation)
        self.attention = STCAtt(c_out, reduction, attention_mode, rng, dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        fact = self.temporal.forward(self.spatial.forward(x, training),
                                     training)
        g3d = self.windowed.forward(x, training)
        if self.stride > 1:
            t = g3d.shape[1]
            t_out = -(-t // self.stride)
            g3d = g3d.narrow(1, 0, t_out, self.stride)
        g3d = self.windowed_bn.forward(g3d, training)
        out = _apply_activation(tz.add(fact, g3d), self.activation)
        return self.attention.forward(out, training)
