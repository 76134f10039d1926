"""Training loop behavior and the cross-view retrieval protocol, checked
against an independent pairwise-enumeration oracle."""

import json
import warnings

import numpy as np
import pytest

from gaitgcn import skeleton
from gaitgcn import tensor as tz
from gaitgcn.evaluate import (AccuracyTable, EvalProtocol, dump_report_json,
                              evaluate_rank1, format_accuracy_report,
                              format_sweep_report, lambda_sweep, pair_records,
                              split_by_protocol)
from gaitgcn.model import (EmbeddingRecord, ModelConfig, MultiStreamModel,
                           StreamSpec)
from gaitgcn.tensor import Tensor
from gaitgcn.train import (SGD, EpochMetrics, TrainConfig, extract_embeddings,
                           subject_labels, train)


# -- schedule and optimizer ------------------------------------------------

def test_learning_rate_schedule():
    config = TrainConfig()
    assert config.learning_rate(0) == 0.1
    assert config.learning_rate(44) == 0.1
    assert config.learning_rate(45) == pytest.approx(0.01)
    assert config.learning_rate(54) == pytest.approx(0.01)
    assert config.learning_rate(55) == pytest.approx(0.001)
    assert config.learning_rate(64) == pytest.approx(0.001)


def test_scaled_schedule():
    config = TrainConfig.scaled(20)
    assert config.epochs == 20
    assert config.decay_epochs == (14, 17)
    assert config.learning_rate(13) == 0.1
    assert config.learning_rate(14) == pytest.approx(0.01)
    assert config.learning_rate(17) == pytest.approx(0.001)
    assert TrainConfig.scaled(65).decay_epochs == (45, 55)


def test_sgd_momentum_steps():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.9)
    p.grad = np.array([1.0])
    opt.step()
    # velocity 0.9*1 + 1 = 1.9, so the step is 0.19
    assert p.data[0] == pytest.approx(0.71)


def test_sgd_weight_decay_and_none_grads():
    p = Tensor(np.array([2.0]), requires_grad=True)
    q = Tensor(np.array([5.0]), requires_grad=True)
    opt = SGD([p, q], lr=0.5, momentum=0.0, weight_decay=0.1)
    p.grad = np.array([1.0])
    opt.step()
    # g = 1 + 0.1*2 = 1.2
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 1.2)
    assert q.data[0] == 5.0
    opt.zero_grad()
    assert p.grad is None and q.grad is None


# -- training loop ---------------------------------------------------------

def tiny_config(n_classes=2, **kw):
    base = dict(n_classes=n_classes, channels=(4, 6, 8), strides=(1, 2, 2),
                reduction=2, streams=(StreamSpec("joint", "multiscale", "st"),))
    base.update(kw)
    return ModelConfig(**base)


def tiny_sequences(n_subjects=2, n_seqs=2, t_frames=10, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_subjects):
        base = rng.random((2, t_frames, 15))
        for q in range(1, n_seqs + 1):
            coords = np.clip(base + 0.05 * rng.standard_normal(base.shape),
                             0.0, 1.0)
            out.append(skeleton.SkeletonSequence(
                f"S{s:03d}", "NM", q, 90, coords))
    return out


def test_subject_labels_sorted():
    seqs = tiny_sequences(n_subjects=3)
    labels = subject_labels(reversed(seqs))
    assert labels == {"S000": 0, "S001": 1, "S002": 2}


def test_train_guards():
    seqs = tiny_sequences()
    model = MultiStreamModel(tiny_config(), seed=0)
    with pytest.raises(ValueError, match="at least 2 subjects"):
        train(model, [s for s in seqs if s.subject_id == "S000"],
              TrainConfig(epochs=1, batch_size=1))
    with pytest.raises(ValueError, match="classes"):
        train(MultiStreamModel(tiny_config(n_classes=3), seed=0), seqs,
              TrainConfig(epochs=1, batch_size=1))
    with pytest.raises(ValueError, match="exceeds training set size"):
        train(model, seqs, TrainConfig(epochs=1, batch_size=64))


def test_train_records_metrics_and_log(tmp_path):
    seqs = tiny_sequences()
    model = MultiStreamModel(tiny_config(), seed=0)
    config = TrainConfig(epochs=3, batch_size=2, lr_init=0.05,
                         decay_epochs=(2,), seed=1)
    log = str(tmp_path / "loss.log")
    history = train(model, seqs, config, log_path=log)
    assert [m.epoch for m in history] == [0, 1, 2]
    assert [m.lr for m in history] == [0.05, 0.05, 0.05 * 0.1]
    assert all(np.isfinite(m.loss) and 0.0 <= m.acc <= 1.0 for m in history)
    lines = open(log).read().splitlines()
    assert len(lines) == 3
    doc = json.loads(lines[0])
    assert sorted(doc) == ["acc", "epoch", "loss", "lr"]
    assert doc["loss"] == history[0].loss


def test_train_deterministic(tmp_path):
    seqs = tiny_sequences()
    config = TrainConfig(epochs=2, batch_size=2, seed=3)
    logs = []
    for run in range(2):
        model = MultiStreamModel(tiny_config(), seed=5)
        log = str(tmp_path / f"run{run}.log")
        train(model, seqs, config, log_path=log)
        logs.append(open(log, "rb").read())
    assert logs[0] == logs[1]


def test_train_early_stop():
    seqs = tiny_sequences()
    model = MultiStreamModel(tiny_config(), seed=0)
    history = train(model, seqs, TrainConfig(epochs=50, batch_size=2),
                    stop_accuracy=0.0)
    assert len(history) == 1


def test_train_aborts_on_nonfinite_loss(monkeypatch):
    seqs = tiny_sequences()
    model = MultiStreamModel(tiny_config(), seed=0)
    monkeypatch.setattr("gaitgcn.tensor.softmax_cross_entropy",
                        lambda logits, label: Tensor(np.array(np.nan)))
    with pytest.raises(RuntimeError, match="training diverged"):
        train(model, seqs, TrainConfig(epochs=1, batch_size=2))


def test_extract_embeddings_eval_mode():
    seqs = tiny_sequences()
    model = MultiStreamModel(tiny_config(), seed=0)
    before = [(s.mean.copy(), s.updates) for _, s in model.named_states()]
    records = extract_embeddings(model, seqs)
    assert [r.key() for r in records] == [q.key() for q in seqs]
    assert all(r.source == "model" for r in records)
    assert all(r.vector.shape == (model.embed_dim,) for r in records)
    for (mean, updates), (_, st) in zip(before, model.named_states()):
        assert np.array_equal(mean, st.mean) and updates == st.updates


# -- retrieval protocol vs enumeration oracle ------------------------------

def oracle_rank1(gallery, probe, protocol):
    """Pairwise enumeration: score every (condition, probe view, gallery
    view) triple by brute-force nearest neighbor, then average."""
    def nearest(vec, cands):
        keys = [((c.vector - vec) @ (c.vector - vec), c.subject_id,
                 c.seq_index) for c in cands]
        return cands[keys.index(min(keys))].subject_id

    gallery = [g for g in gallery
               if g.condition == protocol.gallery_condition
               and g.seq_index in protocol.gallery_seqs
               and g.view_deg in protocol.views]
    cells = {}
    means = {}
    for cond, seqs in protocol.probe_sets.items():
        defined = []
        for pv in protocol.views:
            probes = [p for p in probe if p.condition == cond
                      and p.seq_index in seqs and p.view_deg == pv]
            if not probes:
                cells[(cond, pv)] = None
                continue
            accs = []
            for gv in protocol.views:
                cands = [g for g in gallery if g.view_deg == gv]
                if gv == pv or not cands:
                    continue
                hits = sum(nearest(p.vector, cands) == p.subject_id
                           for p in probes)
                accs.append(hits / len(probes))
            if not accs:
                cells[(cond, pv)] = None
                continue
            cells[(cond, pv)] = float(np.mean(accs))
            defined.append(cells[(cond, pv)])
        means[cond] = float(np.mean(defined)) if defined else None
    return cells, means


def random_instance(rng, dim=3):
    views = tuple(sorted(rng.choice(skeleton.VIEWS_DEG,
                                    size=rng.integers(2, 5), replace=False)))
    protocol = EvalProtocol(views=views)
    n_subjects = int(rng.integers(2, 6))
    subjects = [f"S{i:03d}" for i in range(n_subjects)]
    gallery, probe = [], []
    for s in subjects:
        for q in (1, 2, 3, 4):
            for v in views:
                if rng.random() < 0.15:
                    continue
                gallery.append(EmbeddingRecord(
                    s, "NM", q, int(v), rng.standard_normal(dim)))
        for cond, seqs in protocol.probe_sets.items():
            for q in seqs:
                for v in views:
                    if rng.random() < 0.15:
                        continue
                    probe.append(EmbeddingRecord(
                        s, cond, q, int(v), rng.standard_normal(dim)))
    return gallery, probe, protocol


def test_rank1_matches_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(50):
        gallery, probe, protocol = random_instance(rng)
        if not gallery or not probe:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            table = evaluate_rank1(gallery, probe, protocol)
        cells, means = oracle_rank1(gallery, probe, protocol)
        assert table.cells == cells
        assert table.means == means
        checked += 1
    assert checked >= 45


def test_identical_view_excluded_denominator():
    """With all 11 views populated, one correct gallery view out of the
    ten non-identical ones must yield exactly 1/10."""
    views = skeleton.VIEWS_DEG
    pv, hit_gv = 90, 36
    gallery, probe = [], []
    for v in views:
        # subject A is nearest only in gallery view hit_gv (including at
        # the identical view, which must not be scored)
        a = 0.1 if v in (hit_gv, pv) else 10.0
        gallery.append(EmbeddingRecord("A", "NM", 1, v, np.array([a])))
        gallery.append(EmbeddingRecord("B", "NM", 1, v, np.array([1.0])))
    probe.append(EmbeddingRecord("A", "NM", 5, pv, np.array([0.0])))
    table = evaluate_rank1(gallery, probe)
    assert table.cells[("NM", pv)] == 1.0 / 10.0


def test_tie_breaks_to_lowest_subject_and_is_order_free():
    views = (0, 90)
    gallery = [
        EmbeddingRecord("B", "NM", 1, 0, np.array([1.0])),
        EmbeddingRecord("A", "NM", 2, 0, np.array([-1.0])),
        EmbeddingRecord("A", "NM", 1, 90, np.array([0.0])),
        EmbeddingRecord("B", "NM", 1, 90, np.array([0.0])),
    ]
    probe = [EmbeddingRecord("B", "NM", 5, 90, np.array([0.0]))]
    protocol = EvalProtocol(views=views)
    table = evaluate_rank1(gallery, probe, protocol)
    # both gallery-0 candidates are exactly 1 away; A wins the tie, so
    # the probe with subject B scores 0
    assert table.cells[("NM", 90)] == 0.0
    flipped = evaluate_rank1(list(reversed(gallery)), probe, protocol)
    assert flipped.cells == table.cells


def test_rank1_invariances():
    rng = np.random.default_rng(1)
    gallery, probe, protocol = random_instance(rng, dim=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = evaluate_rank1(gallery, probe, protocol)
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))

        def remap(recs, f):
            return [EmbeddingRecord(r.subject_id, r.condition, r.seq_index,
                                    r.view_deg, f(r.vector), r.source)
                    for r in recs]

        rotated = evaluate_rank1(remap(gallery, q.__matmul__),
                                 remap(probe, q.__matmul__), protocol)
        scaled = evaluate_rank1(remap(gallery, lambda v: 3.0 * v),
                                remap(probe, lambda v: 3.0 * v), protocol)
    assert rotated.cells == base.cells
    assert scaled.cells == base.cells


def test_empty_cells_warn_and_mean_skips_them():
    views = (0, 90, 180)
    gallery = [EmbeddingRecord("A", "NM", 1, v, np.array([0.0]))
               for v in views]
    gallery += [EmbeddingRecord("B", "NM", 1, v, np.array([2.0]))
                for v in views]
    # NM probes only at view 0; no BG or CL probes at all
    probe = [EmbeddingRecord("A", "NM", 5, 0, np.array([0.1]))]
    protocol = EvalProtocol(views=views)
    with pytest.warns(UserWarning, match="cell excluded"):
        table = evaluate_rank1(gallery, probe, protocol)
    assert table.cells[("NM", 0)] == 1.0
    assert table.cells[("NM", 90)] is None
    assert table.means["NM"] == 1.0
    assert table.means["BG"] is None
    assert table.overall_mean() == 1.0


def test_rank1_rejects_empty_sides():
    rec = EmbeddingRecord("A", "NM", 1, 0, np.array([0.0]))
    with pytest.raises(ValueError, match="gallery"):
        evaluate_rank1([], [rec], EvalProtocol(views=(0,)))
    with pytest.raises(ValueError, match="probe"):
        evaluate_rank1([rec], [], EvalProtocol(views=(0,)))


def test_split_by_protocol():
    protocol = EvalProtocol(views=(0, 90))
    recs = [
        EmbeddingRecord("A", "NM", 1, 0, np.ones(2)),     # gallery
        EmbeddingRecord("A", "NM", 5, 0, np.ones(2)),     # probe
        EmbeddingRecord("A", "BG", 1, 90, np.ones(2)),    # probe
        EmbeddingRecord("A", "NM", 7, 0, np.ones(2)),     # neither
        EmbeddingRecord("A", "NM", 1, 45, np.ones(2)),    # off-protocol view
    ]
    gallery, probe = split_by_protocol(recs, protocol)
    assert [r.seq_index for r in gallery] == [1]
    assert [(r.condition, r.seq_index) for r in probe] == [("NM", 5),
                                                          ("BG", 1)]


# -- reports and the fusion sweep ------------------------------------------

def test_format_accuracy_report():
    views = (0, 90)
    table = AccuracyTable(
        conditions=("NM",), views=views,
        cells={("NM", 0): 0.5, ("NM", 90): None}, means={"NM": 0.5})
    text = format_accuracy_report(table)
    lines = text.splitlines()
    assert lines[0] == "condition view accuracy"
    assert "NM 0 0.5000" in lines
    assert "NM 90 undefined" in lines
    assert lines[-1] == "NM mean 0.5000"
    assert text.endswith("\n")


def sweep_instance(seed=0, appearance="random"):
    rng = np.random.default_rng(seed)
    f_m, f_a = [], []
    views = (0, 90, 180)
    for s in ("S000", "S001", "S002"):
        center = rng.standard_normal(3) * 2.0
        for cond, seqs in (("NM", (1, 2, 3, 4, 5, 6)),
                           ("BG", (1, 2)), ("CL", (1, 2))):
            for q in seqs:
                for v in views:
                    vec = center + 0.3 * rng.standard_normal(3)
                    f_m.append(EmbeddingRecord(s, cond, q, v, vec))
                    if appearance == "random":
                        a = rng.standard_normal(2)
                    else:
                        a = np.array([1.5, -2.0])
                    f_a.append(EmbeddingRecord(s, cond, q, v, a,
                                               source="appearance"))
    return f_m, f_a, EvalProtocol(views=views)


def test_lambda_sweep_rows():
    f_m, f_a, protocol = sweep_instance()
    lambdas = [300.0, 350.0, 400.0, 450.0, 500.0]
    rows = lambda_sweep(f_m, f_a, lambdas, protocol)
    assert [r["lambda"] for r in rows] == lambdas
    for row in rows:
        assert sorted(row) == ["BG", "CL", "Mean", "NM", "lambda"]
        for cond in ("NM", "BG", "CL"):
            assert 0.0 <= row[cond] <= 1.0
    report = format_sweep_report(rows)
    assert report.splitlines()[0] == "lambda NM BG CL Mean"
    assert len(report.splitlines()) == 6


def test_lambda_sweep_constant_appearance_is_flat():
    """A shared appearance vector cancels in every pairwise difference,
    so the weight has no effect on any accuracy."""
    f_m, f_a, protocol = sweep_instance(appearance="constant")
    rows = lambda_sweep(f_m, f_a, [1.0, 400.0, 1e6], protocol)
    for cond in ("NM", "BG", "CL", "Mean"):
        assert rows[0][cond] == rows[1][cond] == rows[2][cond]


def test_pair_records_guards():
    f_m, f_a, _ = sweep_instance()
    pairs = pair_records(f_m, f_a)
    assert all(m.key() == a.key() for m, a in pairs)
    assert [m.key() for m, _ in pairs] == [m.key() for m in f_m]
    with pytest.raises(ValueError, match="duplicate"):
        pair_records(f_m, f_a + [f_a[0]])
    with pytest.raises(ValueError, match="mismatch"):
        pair_records(f_m, f_a[:-1])
    swapped = f_a[:-1] + [EmbeddingRecord("S999", "NM", 1, 0, np.ones(2))]
    with pytest.raises(ValueError, match="no appearance record"):
        pair_records(f_m, swapped)


def test_dump_report_json_stable(tmp_path):
    doc = {"b": [1, 2], "a": {"y": None, "x": 0.5}}
    p1, p2 = str(tmp_path / "r1.json"), str(tmp_path / "r2.json")
    dump_report_json(doc, p1)
    dump_report_json({"a": {"x": 0.5, "y": None}, "b": [1, 2]}, p2)
    raw = open(p1, "rb").read()
    assert raw == open(p2, "rb").read()
    assert raw.endswith(b"\n")
    assert json.loads(raw) == doc
