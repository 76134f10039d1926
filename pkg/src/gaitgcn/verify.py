"""Self-verification suites: finite-difference sweeps over every layer
kind, and property checks against oracles that are deliberately written
as brute force (matrix powers, pairwise enumeration) rather than sharing
code with the implementation they test."""

from __future__ import annotations

import os
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from . import graph, layers, skeleton, synthetic
from .evaluate import EvalProtocol, evaluate_rank1
from .model import (EmbeddingRecord, ModelConfig, MultiStreamModel,
                    StreamSpec, load_checkpoint, save_checkpoint)
from .tensor import Tensor, finite_difference_check

GRADCHECK_THRESHOLD = 1e-4

# a 5-node tree, small enough that full-model probes stay cheap
SMALL_PARENT = (1, 1, 1, 1, 3)
SMALL_EDGES = ((0, 1), (1, 2), (1, 3), (3, 4))


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{tag} {self.name}  max-rel-err {self.value:.3e}{extra}"


def _get_slot(root, parts):
    obj = root
    for part in parts:
        if isinstance(obj, (list, tuple)):
            obj = obj[int(part)]
        elif isinstance(obj, dict):
            obj = obj[part]
        else:
            obj = getattr(obj, part)
    return obj


def _swap_param(root, name: str, value) -> None:
    """Replace the tensor object behind a dotted parameter name, so the
    autodiff graph tracks the candidate instead of the original."""
    parts = name.split(".")
    holder = _get_slot(root, parts[:-1])
    last = parts[-1]
    if isinstance(holder, list):
        holder[int(last)] = value
    elif isinstance(holder, dict):
        holder[last] = value
    else:
        setattr(holder, last, value)


def _spread(names, limit=3):
    if len(names) <= limit:
        return list(names)
    return [names[0], names[len(names) // 2], names[-1]]


def _max_fd_error(layer, loss_of, in_shape, rng) -> float:
    x0 = rng.standard_normal(in_shape) + 0.1
    worst = finite_difference_check(loss_of, Tensor(x0.copy()), 1e-5)
    names = sorted(name for name, _ in layer.named_parameters())
    for name in _spread(names):
        original = _get_slot(layer, name.split("."))

        def with_param(p, _name=name):
            _swap_param(layer, _name, p)
            return loss_of(Tensor(x0.copy()))

        err = finite_difference_check(
            with_param, Tensor(np.array(original.data, dtype=np.float64)),
            1e-5)
        _swap_param(layer, name, original)
        worst = max(worst, err)
    return worst


def _gradcheck_cases(rng):
    v = len(SMALL_PARENT)
    scales = graph.multi_scale_adjacency(v, SMALL_EDGES, 2)
    natural = graph.natural_adjacency(v, SMALL_EDGES)
    full = [graph.full_adjacency(v)]

    cases = [
        ("spatial-hop-scales",
         layers.SpatialGCN(2, 3, scales, rng), (2, 4, v)),
        ("spatial-full",
         layers.SpatialGCN(2, 3, full, rng), (2, 4, v)),
        ("temporal-multibranch",
         layers.TemporalConv(2, 4, 2, rng, bn_eps=1e-3), (2, 6, v)),
        ("windowed-unified",
         layers.UnifiedSTGC(2, 3, natural, 3, 1, rng), (2, 4, v)),
    ]
    for mode in layers.STCAtt.MODES:
        cases.append((f"attention-{mode}",
                      layers.STCAtt(4, 2, mode, rng), (4, 5, v)))
    cases.append((
        "block-two-pathway",
        layers.STGCBlock(2, 4, 2, scales, natural, rng, bn_eps=1e-3,
                         attention_mode="stc", reduction=2), (2, 6, v)))
    return cases


def _small_model_config() -> ModelConfig:
    return ModelConfig(
        n_classes=2, channels=(3, 4, 4), strides=(1, 2, 2), num_scales=2,
        reduction=1, bn_eps=1e-3, parents=SMALL_PARENT,
        streams=(StreamSpec("joint", "multiscale", "stc"),))


def gradcheck_suite(seeds: int = 5,
                    threshold: float = GRADCHECK_THRESHOLD,
                    base_seed: int = 0) -> list[CheckResult]:
    """Max relative finite-difference error per layer kind, over fresh
    weights and inputs for each seed, probing the input and a spread of
    parameters."""
    worst: dict[str, float] = {}
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([base_seed, s]))
        for name, layer, shape in _gradcheck_cases(rng):
            err = _max_fd_error(
                layer, lambda t, lay=layer: lay.forward(t).sum(), shape, rng)
            worst[name] = max(worst.get(name, 0.0), err)

        net = MultiStreamModel(_small_model_config(), seed=int(
            rng.integers(1 << 30))).streams["joint"]
        # the deep stack attenuates gradients to ~1e-6; scale the loss so
        # the relative-error denominator does not swallow real mismatches
        err = _max_fd_error(
            net, lambda t: net.forward(t)["logits"].sum().scale(1e3),
            (2, 6, 5), rng)
        worst["stream-model"] = max(worst.get("stream-model", 0.0), err)
    return [CheckResult(name, err < threshold, err)
            for name, err in worst.items()]


# -- property suite --------------------------------------------------------

def _random_tree_edges(rng, v):
    """Decode a random Pruefer sequence into tree edges."""
    if v == 1:
        return ()
    if v == 2:
        return ((0, 1),)
    seq = list(rng.integers(0, v, size=v - 2))
    degree = [1] * v
    for node in seq:
        degree[node] += 1
    edges = []
    for node in seq:
        for leaf in range(v):
            if degree[leaf] == 1:
                edges.append((leaf, node))
                degree[leaf] -= 1
                degree[node] -= 1
                break
    last = [i for i in range(v) if degree[i] == 1]
    edges.append((last[0], last[1]))
    return tuple(edges)


def _hops_by_matrix_powers(edges, v):
    """Exact hop counts from boolean powers of the one-step adjacency."""
    step = np.zeros((v, v), dtype=bool)
    for a, b in edges:
        step[a, b] = step[b, a] = True
    dist = np.full((v, v), -1, dtype=int)
    np.fill_diagonal(dist, 0)
    reach = np.eye(v, dtype=bool)
    frontier = np.eye(v, dtype=bool)
    for k in range(1, v):
        frontier = (frontier @ step) & ~reach
        dist[frontier & (dist < 0)] = k
        reach |= frontier
    return dist


def _check_k_adjacency(rng) -> tuple[bool, str]:
    for trial in range(20):
        v = int(rng.integers(2, 16))
        edges = _random_tree_edges(rng, v)
        dist = _hops_by_matrix_powers(edges, v)
        if not np.array_equal(graph.hop_distances(v, edges), dist):
            return False, f"hop table mismatch on trial {trial}"
        for k in range(int(dist.max()) + 1):
            want = (dist == k) | np.eye(v, dtype=bool)
            got = graph.k_adjacency(v, edges, k) > 0
            if not np.array_equal(got, want):
                return False, f"k={k} mismatch on trial {trial}"
    topo = skeleton.default_topology()
    dist = graph.hop_distances(topo.num_joints, topo.edges)
    wrist, ankle = (skeleton.JOINT_INDEX["RWrist"],
                    skeleton.JOINT_INDEX["LAnkle"])
    if dist[wrist, ankle] != 7:
        return False, f"wrist-ankle distance {dist[wrist, ankle]} != 7"
    return True, ""


def _check_full_mean(rng) -> tuple[bool, str]:
    for v in (1, 5, 15):
        agg = graph.normalize_aggregator(graph.full_adjacency(v))
        x = rng.standard_normal((7, v))
        err = np.abs(x @ agg.T - x.mean(axis=1, keepdims=True)).max()
        if err >= 1e-12:
            return False, f"V={v} deviates by {err:.2e}"
    return True, ""


def _check_attention_rank(rng) -> tuple[bool, str]:
    for trial in range(10):
        c = int(rng.choice([4, 8, 12]))
        r = int(rng.choice([2, 4]))
        mode = ("stc", "st")[trial % 2]
        t, v = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        att = layers.STCAtt(c, r, mode, rng)
        x = Tensor(rng.standard_normal((c, t, v)))
        gate = att.st_gate(x)
        for ch in range(c):
            s = np.linalg.svd(gate.data[ch], compute_uv=False)
            if s.size > 1 and s[1] >= 1e-10 * s[0]:
                return False, f"trial {trial} channel {ch} rank > 1"
        if not (0 < gate.data.min() and gate.data.max() < 1):
            return False, f"trial {trial} gate outside (0,1)"
        out = att.forward(x)
        if not np.all(np.abs(out.data) <= np.abs(x.data)):
            return False, f"trial {trial} output grew somewhere"
    return True, ""


def _check_tau1_equals_spatial(rng) -> tuple[bool, str]:
    v = len(SMALL_PARENT)
    scales = graph.multi_scale_adjacency(v, SMALL_EDGES, 2)
    spa = layers.SpatialGCN(2, 3, [scales[1]], rng)
    uni = layers.UnifiedSTGC(2, 3, scales[1], 1, 1, rng)
    uni.weight = spa.weights[0]
    uni.mask = spa.masks[0]
    x = rng.standard_normal((2, 6, v))
    a = spa.forward(Tensor(x)).data
    b = uni.forward(Tensor(x)).data
    return (np.array_equal(a, b),
            "" if np.array_equal(a, b) else "outputs differ bitwise")


def _enumerate_rank1(gallery, probe, protocol):
    cells = {}
    means = {}
    filtered = [g for g in gallery
                if g.condition == protocol.gallery_condition
                and g.seq_index in protocol.gallery_seqs
                and g.view_deg in protocol.views]
    for cond, seqs in protocol.probe_sets.items():
        defined = []
        for pv in protocol.views:
            probes = [p for p in probe if p.condition == cond
                      and p.seq_index in seqs and p.view_deg == pv]
            accs = []
            for gv in protocol.views:
                cands = [g for g in filtered if g.view_deg == gv]
                if gv == pv or not cands or not probes:
                    continue
                hits = 0
                for p in probes:
                    ranked = sorted(
                        ((c.vector - p.vector) @ (c.vector - p.vector),
                         c.subject_id, c.seq_index) for c in cands)
                    hits += ranked[0][1] == p.subject_id
                accs.append(hits / len(probes))
            cells[(cond, pv)] = float(np.mean(accs)) if accs else None
            if accs:
                defined.append(cells[(cond, pv)])
        means[cond] = float(np.mean(defined)) if defined else None
    return cells, means


def _check_protocol_oracle(rng) -> tuple[bool, str]:
    for trial in range(20):
        views = tuple(sorted(rng.choice(skeleton.VIEWS_DEG,
                                        size=int(rng.integers(2, 5)),
                                        replace=False).tolist()))
        protocol = EvalProtocol(views=views)
        gallery, probe = [], []
        for i in range(int(rng.integers(2, 6))):
            sid = f"S{i:03d}"
            for q in (1, 2, 3, 4):
                for view in views:
                    if rng.random() < 0.2:
                        continue
                    gallery.append(EmbeddingRecord(
                        sid, "NM", q, int(view), rng.standard_normal(3)))
            for cond, seqs in protocol.probe_sets.items():
                for q in seqs:
                    for view in views:
                        if rng.random() < 0.2:
                            continue
                        probe.append(EmbeddingRecord(
                            sid, cond, q, int(view), rng.standard_normal(3)))
        if not gallery or not probe:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            table = evaluate_rank1(gallery, probe, protocol)
        cells, means = _enumerate_rank1(gallery, probe, protocol)
        if table.cells != cells or table.means != means:
            return False, f"disagrees with enumeration on trial {trial}"
    return True, ""


def _check_determinism(rng, workdir=None) -> tuple[bool, str]:
    a = synthetic.generate_synthetic_dataset(2, 2, (0, 90), 20, seed=5)
    b = synthetic.generate_synthetic_dataset(2, 2, (0, 90), 20, seed=5)
    if [q.key() for q in a] != [q.key() for q in b]:
        return False, "generated sequence keys differ"
    if not all(np.array_equal(x.coords, y.coords) for x, y in zip(a, b)):
        return False, "generated coordinates differ"

    config = _small_model_config()
    m1 = MultiStreamModel(config, seed=3)
    m2 = MultiStreamModel(config, seed=3)
    p1, p2 = dict(m1.named_parameters()), dict(m2.named_parameters())
    if not all(np.array_equal(p1[k].data, p2[k].data) for k in p1):
        return False, "same-seed weights differ"

    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = os.path.join(tmp, "model.ckpt")
        save_checkpoint(m1, path)
        loaded, _ = load_checkpoint(path)
    x = rng.standard_normal((2, 12, len(SMALL_PARENT)))
    topo = skeleton.topology_from_parents(SMALL_PARENT)
    bundle = skeleton.derive_streams(x - x.min(), topo)
    if not np.array_equal(m1.embed_bundle(bundle),
                          loaded.embed_bundle(bundle)):
        return False, "checkpoint round trip changed the embedding"
    return True, ""


def selftest_suite(seed: int = 0) -> list[CheckResult]:
    """Property checks, one result per property."""
    checks = [
        ("k-adjacency-matches-matrix-powers", _check_k_adjacency),
        ("full-graph-equals-joint-mean", _check_full_mean),
        ("attention-maps-rank-one", _check_attention_rank),
        ("window-one-equals-spatial", _check_tau1_equals_spatial),
        ("protocol-matches-enumeration", _check_protocol_oracle),
        ("seeded-runs-reproduce", _check_determinism),
    ]
    results = []
    for name, fn in checks:
        rng = np.random.default_rng(np.random.SeedSequence(
            [seed, len(results)]))
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crash is a failed property, not a crash
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, ok, 0.0, detail))
    return results


def format_results(results, show_value: bool = True) -> str:
    lines = []
    for r in results:
        if show_value:
            lines.append(r.line())
        else:
            tag = "PASS" if r.passed else "FAIL"
            extra = f"  {r.detail}" if r.detail else ""
            lines.append(f"{tag} {r.name}{extra}")
    return "\n".join(lines) + "\n"
