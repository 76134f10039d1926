"""Layers against explicit loop oracles, closed forms, and gradient checks."""

import numpy as np
import pytest

from gaitgcn import graph, layers, skeleton
from gaitgcn import tensor as tz
from gaitgcn.tensor import Tensor, finite_difference_check

TOPO = skeleton.default_topology()


def small_graph():
    # 5-node tree: 0-1, 1-2, 1-3, 3-4
    edges = [(0, 1), (1, 2), (1, 3), (3, 4)]
    return 5, edges


def spatial_oracle(x, adjacencies, masks, weights, act):
    """Triple-loop recomputation of the graph convolution."""
    c_in, t, v = x.shape
    c_out = weights[0].shape[1]
    out = np.zeros((c_out, t, v))
    for a, m, w in zip(adjacencies, masks, weights):
        norm = graph.normalize_aggregator(a, m)
        for co in range(c_out):
            for ti in range(t):
                for vi in range(v):
                    acc = 0.0
                    for vj in range(v):
                        for ci in range(c_in):
                            acc += norm[vi, vj] * x[ci, ti, vj] * w[ci, co]
                    out[co, ti, vi] += acc
    return np.maximum(out, 0.0) if act == "relu" else out


def test_spatial_gcn_matches_loop_oracle():
    rng = np.random.default_rng(21)
    v, edges = small_graph()
    adjs = graph.multi_scale_adjacency(v, edges, 2)
    layer = layers.SpatialGCN(3, 4, adjs, rng)
    for m in layer.masks:
        m.data = rng.standard_normal((v, v)) * 0.3
    x = rng.standard_normal((3, 6, v))
    got = layer.forward(Tensor(x)).data
    want = spatial_oracle(x, adjs, [m.data for m in layer.masks],
                          [w.data for w in layer.weights], "relu")
    assert np.max(np.abs(got - want)) < 1e-10


def test_spatial_gcn_single_node_identity():
    rng = np.random.default_rng(1)
    layer = layers.SpatialGCN(2, 2, [np.ones((1, 1))], rng,
                              activation="linear")
    layer.weights[0].data = np.eye(2)
    x = rng.standard_normal((2, 5, 1))
    assert np.allclose(layer.forward(Tensor(x)).data, x)


def test_spatial_gcn_full_kind_is_joint_mean():
    rng = np.random.default_rng(2)
    v = 6
    layer = layers.SpatialGCN(3, 3, [graph.full_adjacency(v)], rng,
                              activation="linear")
    layer.weights[0].data = np.eye(3)
    x = rng.standard_normal((3, 4, v))
    out = layer.forward(Tensor(x)).data
    want = np.broadcast_to(x.mean(axis=2, keepdims=True), x.shape)
    assert np.max(np.abs(out - want)) < 1e-12


def test_spatial_gcn_full_kind_permutation_equivariant():
    rng = np.random.default_rng(3)
    v = 7
    layer = layers.SpatialGCN(2, 4, [graph.full_adjacency(v)], rng)
    x = rng.standard_normal((2, 5, v))
    perm = rng.permutation(v)
    out = layer.forward(Tensor(x)).data
    out_p = layer.forward(Tensor(x[:, :, perm])).data
    assert np.allclose(out_p, out[:, :, perm], atol=1e-12)


def temporal_oracle(layer, x):
    """Re-run TemporalConv with plain numpy in evaluation mode."""
    def bn(h, b):
        st = b.state
        return (b.gamma.data[:, None, None]
                * (h - st.mean[:, None, None])
                / np.sqrt(st.var[:, None, None] + b.eps)
                + b.beta.data[:, None, None])

    def conv_t(h, w, stride, dilation):
        f, c, k, _ = w.shape
        pad = dilation * (k - 1) // 2
        hp = np.pad(h, ((0, 0), (pad, pad), (0, 0)))
        t_out = (h.shape[1] + 2 * pad - dilation * (k - 1) - 1) // stride + 1
        out = np.zeros((f, t_out, h.shape[2]))
        for fi in range(f):
            for ti in range(t_out):
                for ki in range(k):
                    for ci in range(c):
                        out[fi, ti] += (w[fi, ci, ki, 0]
                                        * hp[ci, ti * stride + ki * dilation])
        return out

    parts = []
    for br in layer.branches:
        h = x
        if br.reduce is not None:
            h = conv_t(h, br.reduce.data, 1, 1)
            h = np.maximum(bn(h, br.reduce_bn), 0.0)
        h = conv_t(h, br.conv.data, br.stride, br.dilation)
        parts.append(bn(h, br.bn))
    out = np.concatenate(parts, axis=0)
    if layer.residual:
        if layer.shortcut is None:
            out = out + x
        else:
            res = conv_t(x, layer.shortcut.data, layer.stride, 1)
            out = out + bn(res, layer.shortcut_bn)
    return out


@pytest.mark.parametrize("stride,c_in,c_out", [(1, 4, 4), (2, 4, 6), (3, 3, 7)])
def test_temporal_conv_matches_loop_oracle(stride, c_in, c_out):
    rng = np.random.default_rng(30 + stride)
    layer = layers.TemporalConv(c_in, c_out, stride, rng)
    # randomize the batchnorm affines and running stats
    for _, st in layer.named_states():
        st.mean = rng.standard_normal(st.mean.shape) * 0.2
        st.var = 0.5 + rng.random(st.var.shape)
    for name, p in layer.named_parameters():
        if name.endswith("gamma"):
            p.data = 0.5 + rng.random(p.data.shape)
        elif name.endswith("beta"):
            p.data = rng.standard_normal(p.data.shape) * 0.1
    x = rng.standard_normal((c_in, 11, 5))
    got = layer.forward(Tensor(x), training=False).data
    want = temporal_oracle(layer, x)
    assert got.shape == (c_out, -(-11 // stride), 5)
    assert np.max(np.abs(got - want)) < 1e-10


def test_temporal_conv_delta_kernel_identity():
    rng = np.random.default_rng(5)
    layer = layers.TemporalConv(3, 3, 1, rng, branches=((3, 1),),
                                residual=False, bn_eps=0.0)
    br = layer.branches[0]
    br.reduce.data = np.eye(3).reshape(3, 3, 1, 1)
    delta = np.zeros((3, 3, 3, 1))
    for c in range(3):
        delta[c, c, 1, 0] = 1.0  # centered tap
    br.conv.data = delta
    x = np.abs(rng.standard_normal((3, 9, 4)))  # positive: relu transparent
    out = layer.forward(Tensor(x), training=False).data
    assert np.max(np.abs(out - x)) < 1e-12


def test_temporal_conv_stride_halves_120():
    rng = np.random.default_rng(6)
    layer = layers.TemporalConv(2, 4, 2, rng)
    out = layer.forward(Tensor(rng.standard_normal((2, 120, 15))))
    assert out.shape == (4, 60, 15)


def test_temporal_split_channels():
    assert layers.split_channels(6, 3) == [2, 2, 2]
    assert layers.split_channels(7, 3) == [3, 2, 2]
    assert layers.split_channels(8, 3) == [3, 3, 2]
    with pytest.raises(ValueError):
        layers.split_channels(2, 3)


def test_unified_tau1_equals_spatial_bitwise():
    rng = np.random.default_rng(7)
    v, edges = small_graph()
    a = graph.natural_adjacency(v, edges)
    uni = layers.UnifiedSTGC(3, 4, a, tau=1, dilation=1, rng=rng)
    spa = layers.SpatialGCN(3, 4, [a], np.random.default_rng(0))
    spa.weights[0].data = uni.weight.data.copy()
    spa.masks[0].data = uni.mask.data.copy()
    uni.mask.data = rng.standard_normal((v, v)) * 0.2
    spa.masks[0].data = uni.mask.data.copy()
    x = rng.standard_normal((3, 8, v))
    out_u = uni.forward(Tensor(x)).data
    out_s = spa.forward(Tensor(x)).data
    assert np.array_equal(out_u, out_s)  # bit-for-bit


def test_unified_full_graph_window_mean():
    rng = np.random.default_rng(8)
    v, tau = 4, 3
    uni = layers.UnifiedSTGC(2, 2, graph.full_adjacency(v), tau=tau,
                             dilation=1, rng=rng, activation="linear")
    uni.weight.data = np.eye(2)
    t = 6
    x = rng.standard_normal((2, t, v))
    out = uni.forward(Tensor(x)).data
    for ti in range(t):
        frames = [x[:, i, :].sum(axis=1) if 0 <= i < t else np.zeros(2)
                  for i in (ti - 1, ti, ti + 1)]
        want = sum(frames) / (tau * v)  # zero-padded borders still count
        for vi in range(v):
            assert np.max(np.abs(out[:, ti, vi] - want)) < 1e-12


def test_unified_matches_gather_oracle():
    rng = np.random.default_rng(9)
    v, edges = small_graph()
    a = graph.natural_adjacency(v, edges)
    tau, d = 3, 2
    uni = layers.UnifiedSTGC(2, 3, a, tau=tau, dilation=d, rng=rng)
    uni.mask.data = rng.standard_normal((tau * v, tau * v)) * 0.2
    t = 7
    x = rng.standard_normal((2, t, v))
    got = uni.forward(Tensor(x)).data

    norm = graph.normalize_aggregator(np.tile(a, (tau, tau)), uni.mask.data)
    w = uni.weight.data
    want = np.zeros((3, t, v))
    for ti in range(t):
        gathered = np.zeros((2, tau * v))
        for wi, off in enumerate((-d, 0, d)):
            src = ti + off
            if 0 <= src < t:
                gathered[:, wi * v:(wi + 1) * v] = x[:, src, :]
        mixed = gathered @ norm.T            # (2, tau*v)
        mapped = w.T @ mixed                 # (3, tau*v)
        want[:, ti, :] = mapped[:, v:2 * v]  # center slice
    assert np.max(np.abs(got - np.maximum(want, 0.0))) < 1e-10


def test_unified_rejects_even_window():
    with pytest.raises(ValueError, match="odd"):
        layers.UnifiedSTGC(2, 2, np.ones((3, 3)), tau=2, dilation=1,
                           rng=np.random.default_rng(0))


def stc_oracle(module, x):
    """Elementwise recomputation of the attention gates."""
    def lin(fc, h):
        return fc.weight.data.T @ h + fc.bias.data[:, None] \
            if h.ndim == 2 else fc.weight.data.T @ h + fc.bias.data

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    c, t, v = x.shape
    out = x.copy()
    if module.mode in ("stc", "c"):
        pooled = x.mean(axis=(1, 2))
        gate = sig(lin(module.fc_excite, np.maximum(lin(module.fc_squeeze,
                                                        pooled), 0.0)))
        out = out * gate[:, None, None]
    if module.mode in ("stc", "st"):
        both = np.concatenate([x.mean(axis=1), x.mean(axis=2)], axis=1)
        z = np.maximum(lin(module.fc_compress, both), 0.0)
        w_joint = sig(lin(module.head_joint, z[:, :v]))
        w_frame = sig(lin(module.head_frame, z[:, v:]))
        st = w_frame[:, :, None] * w_joint[:, None, :]
        out = out * st
    return out


@pytest.mark.parametrize("mode", ["stc", "st", "c", "none"])
def test_stc_att_matches_oracle_and_contracts(mode):
    rng = np.random.default_rng(40)
    module = layers.STCAtt(8, 4, mode, rng)
    for _ in range(3):
        x = rng.standard_normal((8, 6, 5))
        got = module.forward(Tensor(x)).data
        want = stc_oracle(module, x)
        assert np.max(np.abs(got - want)) < 1e-10
        assert np.all(np.abs(got) <= np.abs(x) + 1e-15)
        if mode == "none":
            assert np.array_equal(got, x)


def test_stc_att_st_map_rank_and_range():
    rng = np.random.default_rng(41)
    for trial in range(10):
        c = int(rng.choice([4, 8, 12]))
        module = layers.STCAtt(c, 4, "st", rng)
        # shake up the head weights so gates are far from constant
        for _, p in module.named_parameters():
            p.data = rng.standard_normal(p.data.shape)
        t, v = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        x = rng.standard_normal((c, t, v))
        st = module.st_gate(Tensor(x)).data
        assert st.shape == (c, t, v)
        assert np.all(st > 0.0) and np.all(st < 1.0)
        for ci in range(c):
            s = np.linalg.svd(st[ci], compute_uv=False)
            assert s[1] < 1e-12 * max(1.0, s[0])  # rank <= 1


def test_stc_att_scalar_case_is_product_of_sigmoids():
    rng = np.random.default_rng(42)
    module = layers.STCAtt(1, 1, "st", rng)
    for _, p in module.named_parameters():
        p.data = rng.standard_normal(p.data.shape)
    x = np.array([[[0.7]]])
    got = module.forward(Tensor(x)).data

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    pooled = x[0, 0, 0]
    z = np.maximum(module.fc_compress.weight.data[0]
                   * np.array([pooled, pooled])
                   + module.fc_compress.bias.data[0], 0.0)
    wv = sig(module.head_joint.weight.data[0, 0] * z[0]
             + module.head_joint.bias.data[0])
    wt = sig(module.head_frame.weight.data[0, 0] * z[1]
             + module.head_frame.bias.data[0])
    assert abs(got[0, 0, 0] - x[0, 0, 0] * wv * wt) < 1e-12


def test_stc_att_rejects_bad_reduction():
    with pytest.raises(ValueError, match="divisible"):
        layers.STCAtt(6, 4, "stc", np.random.default_rng(0))
    with pytest.raises(ValueError, match="mode"):
        layers.STCAtt(8, 4, "soft", np.random.default_rng(0))


def make_block(rng, c_in=3, c_out=4, stride=1, tau=3, **kw):
    v, edges = small_graph()
    adjs = graph.multi_scale_adjacency(v, edges, 2)
    base = graph.natural_adjacency(v, edges)
    return layers.STGCBlock(c_in, c_out, stride, adjs, base, rng, tau=tau,
                            dilation=1, reduction=4, **kw), v


def test_block_shapes_and_stride():
    rng = np.random.default_rng(50)
    block, v = make_block(rng, stride=2, c_out=8)
    out = block.forward(Tensor(rng.standard_normal((3, 11, v))))
    assert out.shape == (8, 6, v)
    block1, _ = make_block(rng, stride=1, c_out=8)
    out1 = block1.forward(Tensor(rng.standard_normal((3, 11, v))))
    assert out1.shape == (8, 11, v)


def test_block_linear_identity_init_doubles_aggregation():
    rng = np.random.default_rng(51)
    v, edges = small_graph()
    a = graph.natural_adjacency(v, edges)
    block = layers.STGCBlock(
        3, 3, 1, [a], a, rng, tau=1, dilation=1, attention_mode="none",
        reduction=1, activation="linear", bn_eps=0.0,
        temporal_branches=((1, 1),), temporal_residual=False)
    block.spatial.weights[0].data = np.eye(3)
    block.windowed.weight.data = np.eye(3)
    block.temporal.branches[0].conv.data = np.eye(3).reshape(3, 3, 1, 1)
    x = rng.standard_normal((3, 6, v))
    out = block.forward(Tensor(x), training=False).data
    agg = np.einsum("vw,ctw->ctv", graph.normalize_aggregator(a), x)
    assert np.max(np.abs(out - 2.0 * agg)) < 1e-12


def test_block_pathway_node_mismatch_rejected():
    rng = np.random.default_rng(52)
    with pytest.raises(ValueError, match="node counts"):
        layers.STGCBlock(2, 4, 1, [np.ones((5, 5))], np.ones((4, 4)), rng)


def test_layer_gradients_against_finite_differences():
    rng = np.random.default_rng(60)
    v, edges = small_graph()
    adjs = graph.multi_scale_adjacency(v, edges, 1)

    spa = layers.SpatialGCN(2, 3, adjs, rng)
    tmp = layers.TemporalConv(2, 4, 2, rng, bn_eps=1e-3)
    uni = layers.UnifiedSTGC(2, 3, adjs[1], 3, 1, rng)
    att = layers.STCAtt(4, 2, "stc", rng)

    cases = [
        ("spatial-input", lambda t: spa.forward(t).sum(), (2, 4, v)),
        ("temporal-input", lambda t: tmp.forward(t).sum(), (2, 6, v)),
        ("unified-input", lambda t: uni.forward(t).sum(), (2, 4, v)),
        ("attention-input", lambda t: att.forward(t).sum(), (4, 5, v)),
    ]
    for name, f, shape in cases:
        x = rng.standard_normal(shape) + 0.1
        err = finite_difference_check(f, Tensor(x), 1e-5)
        assert err < 1e-5, f"{name}: fd error {err:.3g}"

    # parameter gradient: swap the tensor object behind one weight
    fixed_x = np.random.default_rng(61).standard_normal((2, 4, v))

    def with_weight(p):
        spa.weights[0] = p
        return spa.forward(Tensor(fixed_x)).sum()

    w0 = spa.weights[0]
    err = finite_difference_check(with_weight, Tensor(w0.data.copy()), 1e-5)
    assert err < 1e-5


def test_named_parameters_and_states_cover_block():
    rng = np.random.default_rng(70)
    block, _ = make_block(rng, attention_mode="stc")
    names = [n for n, _ in block.named_parameters()]
    assert len(names) == len(set(names))
    assert any("spatial.weights.0" in n for n in names)
    assert any("windowed.mask" in n for n in names)
    assert any("attention.fc_squeeze.weight" in n for n in names)
    states = [n for n, _ in block.named_states()]
    assert any("temporal.branches.0.bn.state" in n for n in states)
