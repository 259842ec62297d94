import dataclasses

import numpy as np
import pytest

from vidqual.errors import ConfigMismatch, EmptyTestSet, InvalidSpec
from vidqual.evaluation import (
    ConfusionMatrix, LabeledTrace, PerturbationSpec, evaluate, extract_trace, k_sweep,
    perturb_trace, predict, robustness_grid, rows_to_csv, train, training_size_sweep,
)
from vidqual.features import FeatureConfig
from vidqual.flow import DOWN, ConnectionTable, accepted_bytes
from vidqual.pipeline import PipelineConfig
from vidqual.synth import AdaptiveMode, FixedMode, TraceSpec, build_dataset, generate_trace

SMALL = TraceSpec(n_titles=4, segments_per_title=8, n_adaptive_seen=1, n_adaptive_unseen=1, seed=3)


@pytest.fixture(scope="module")
def data():
    ds = build_dataset(SMALL)
    tfs = {}
    for st in ds:
        tfs.setdefault(st.split, []).append(extract_trace(LabeledTrace.from_synthetic(st)))
    return ds, tfs


class TestConfusion:
    def test_perfect(self):
        cm = ConfusionMatrix(3)
        for y in (1, 2, 3):
            cm.add_many([y] * 30, [y] * 30)
        assert cm.accuracy == 1.0
        assert np.array_equal(cm.counts, np.diag([30, 30, 30]))

    def test_constant_answer(self):
        cm = ConfusionMatrix(3)
        cm.add_many([1] * 10 + [2] * 20 + [3] * 10, [1] * 40)
        assert cm.counts[:, 0].sum() == 40 and cm.accuracy == 0.25

    def test_merge_and_csv(self):
        a, b = ConfusionMatrix(2), ConfusionMatrix(2)
        a.add(1, 1)
        b.add(2, 1, 3)
        c = a.merge(b)
        assert c.total == 4 and c.recall() == [1.0, 0.0]
        text = c.to_csv({1: "lo", 2: "hi"})
        assert text.splitlines()[0] == "true\\pred,lo,hi,recall"
        assert text.splitlines()[-1] == "accuracy,0.250000"

    def test_empty_accuracy_nan(self):
        assert np.isnan(ConfusionMatrix(2).accuracy)


class TestPerturb:
    recs = generate_trace(TraceSpec(segments_per_title=5, seed=1), 0)[0]

    def test_identity(self):
        assert perturb_trace(self.recs, PerturbationSpec()) == self.recs

    def test_parse(self):
        p = PerturbationSpec.parse("delay=500,loss=10,seed=1")
        assert (p.delay_ms, p.loss_pct, p.seed, p.jitter) == (500, 10, 1, 50)
        assert PerturbationSpec.parse("").is_identity()
        for bad in ("delay", "foo=1", "loss=x", "loss=100"):
            with pytest.raises(InvalidSpec):
                PerturbationSpec.parse(bad)

    def test_deterministic(self):
        p = PerturbationSpec(delay_ms=100, loss_pct=5, seed=9)
        assert perturb_trace(self.recs, p) == perturb_trace(self.recs, p)

    def test_sorted_and_same_multiset(self):
        out = perturb_trace(self.recs, PerturbationSpec(delay_ms=300, loss_pct=20, seed=2))
        ts = [r.timestamp for r in out]
        assert ts == sorted(ts) and len(out) == len(self.recs)
        key = lambda r: (r.tuple, r.seq, r.payload_len, r.flags)
        assert sorted(map(key, out)) == sorted(map(key, self.recs))

    def test_delay_keeps_order_and_bits(self):
        out = perturb_trace(self.recs, PerturbationSpec(delay_ms=1000, seed=2))
        assert accepted_bytes(out) == accepted_bytes(self.recs)

    def test_loss_count_binomial(self):
        table = ConnectionTable()
        n_payload = 0
        for r in self.recs:
            f, _ = table.match(r)
            n_payload += f.direction(r) == DOWN and r.payload_len > 0
        p = PerturbationSpec(loss_pct=50, rto_ms=200, seed=4)
        out = perturb_trace(self.recs, p)
        # without delay only lost packets are re-timed, each one rto later
        before = {id(r) for r in self.recs}
        lost = sum(1 for r in out if id(r) not in before)
        assert n_payload > 1000
        assert abs(lost - n_payload / 2) <= 4 * (n_payload * 0.25) ** 0.5

    def test_validation(self):
        with pytest.raises(InvalidSpec):
            PerturbationSpec(delay_ms=-1)
        with pytest.raises(InvalidSpec):
            PerturbationSpec(loss_pct=100)


def test_train_and_evaluate(data):
    _, tfs = data
    model = train(tfs["train"], k=6, seed=0, restarts=3)
    cm = evaluate(tfs["test-fixed-train-titles"], model)
    assert cm.total == 4 * 3 * (8 - 2) and cm.accuracy > 0.6


def test_baselines_in_envelope(data):
    _, tfs = data
    naive = train(tfs["train"], k=6, seed=0, restarts=2, baseline="naive")
    assert naive.baseline["kind"] == "naive"
    assert evaluate(tfs["test-fixed-train-titles"], naive, "naive").total > 0
    lz = train(tfs["train"], k=4, seed=0, restarts=2, baseline="lz78", feature_kind="timediff")
    cm = evaluate(tfs["test-fixed-train-titles"], lz, "lz78")
    assert cm.total == 4 * 3 * (8 - 1)
    with pytest.raises(ConfigMismatch):
        evaluate(tfs["test-fixed-train-titles"], naive, "lz78")
    with pytest.raises(ValueError):
        train(tfs["train"], baseline="naive", feature_kind="timediff")


def test_config_mismatch(data):
    _, tfs = data
    model = train(tfs["train"], k=4, seed=0, restarts=1)
    other = tfs["test-fixed-train-titles"][0].with_features(FeatureConfig(drop_last=False))
    with pytest.raises(ConfigMismatch):
        predict(other, model)


def test_empty_testset(data):
    _, tfs = data
    model = train(tfs["train"], k=4, seed=0, restarts=1)
    with pytest.raises(EmptyTestSet):
        evaluate([], model)


def test_adaptive_labels_follow_schedule(data):
    _, tfs = data
    (tf,) = tfs["test-adaptive-train-titles"]
    values, labels = tf.samples()
    assert labels == tf.trace.truth.labels[1:-1] and len(values) == len(labels)


def test_timediff_samples(data):
    _, tfs = data
    tf = tfs["train"][0]
    deltas, labels = tf.samples("timediff")
    starts = [p.start for p in tf.video_peaks()]
    assert deltas == [b - a for a, b in zip(starts, starts[1:])]
    assert len(labels) == len(deltas)
    with pytest.raises(ValueError):
        tf.samples("nope")


def test_sweeps(data):
    _, tfs = data
    rows = k_sweep(tfs["train"], tfs["test-fixed-train-titles"], [1, 3], seed=0, restarts=1)
    assert [r["k"] for r in rows] == [1, 3]
    # one symbol: every feature gets the label of the profile nearest that center
    assert 0 < rows[0]["accuracy"] <= 0.5
    rows = training_size_sweep([2, 4], tfs["train"], tfs["test-fixed-train-titles"],
                               seed=0, k=4, restarts=1)
    assert [(r["n_titles"], r["with_last_peak"]) for r in rows] == \
           [(2, False), (2, True), (4, False), (4, True)]
    full = train(tfs["train"], k=4, seed=0, restarts=1)
    assert rows[2]["accuracy"] == evaluate(tfs["test-fixed-train-titles"], full).accuracy
    with pytest.raises(ValueError):
        training_size_sweep([9], tfs["train"], tfs["train"])
    assert rows_to_csv(rows).splitlines()[0] == "n_titles,with_last_peak,accuracy"
    assert rows_to_csv([]) == ""


def test_robustness_grid_identity_matches_evaluate(data):
    ds, tfs = data
    model = train(tfs["train"], k=6, seed=0, restarts=2)
    traces = [LabeledTrace.from_synthetic(s) for s in ds if s.split == "test-fixed-train-titles"]
    rows = robustness_grid(model, traces, [0], [0, 10], seed=1)
    assert rows[0]["accuracy"] == evaluate(tfs["test-fixed-train-titles"], model).accuracy
    assert len(rows) == 2


def test_label_at_without_truth():
    lt = LabeledTrace([], "x", label=2)
    assert lt.label_at(5.0) == 2
    with pytest.raises(Exception):
        LabeledTrace([], "y").label_at(0.0)


def test_extract_with_custom_config():
    recs, gt = generate_trace(TraceSpec(segments_per_title=6, mode=FixedMode(3)), 1)
    cfg = PipelineConfig(features=FeatureConfig(drop_first=False, drop_last=False))
    tf = extract_trace(LabeledTrace(recs, "t", 3, gt), cfg)
    assert [f.value for f in tf.features()] == gt.bits
    tf2 = tf.with_features(dataclasses.replace(cfg.features, drop_first=True))
    assert [f.value for f in tf2.features()] == gt.bits[1:]
    with pytest.raises(ConfigMismatch):
        tf.with_features(FeatureConfig(silence_gap_s=2.0))


def test_adaptive_mode_random_switch():
    recs, gt = generate_trace(TraceSpec(segments_per_title=10, mode=AdaptiveMode()), 2,
                              "test-adaptive-train-titles")
    assert gt.labels[0] == 1 and gt.labels[-1] == 3 and sorted(gt.labels) == gt.labels
