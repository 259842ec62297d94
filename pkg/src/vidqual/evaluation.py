"""Evaluation harness: confusion matrices, parameter sweeps, trace perturbation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .baselines import Lz78Model, NaiveModel, fit_lz78, fit_naive, naive_classify
from .classifier import classify_value
from .codebook import DEFAULT_K, DEFAULT_RESTARTS, DEFAULT_SEED, QualityModel, TrainingEntry, TrainingSet, train_model
from .errors import ConfigMismatch, EmptyTestSet, InsufficientData, InvalidSpec
from .features import FeatureConfig, Peak, SegmentFeature, peaks_to_features, video_peaks
from .flow import DOWN, ConnectionTable, PacketRecord
from .pipeline import FlowFeatures, PipelineConfig, extract_flows
from .synth import GroundTruth, SyntheticTrace

SELECTORS = ("proposed", "naive", "lz78")
FEATURE_KINDS = ("bitrate", "timediff")


@dataclass
class ConfusionMatrix:
    """Rows are true labels 1..m, columns predicted labels."""

    m: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.m, self.m), dtype=np.int64)

    def add(self, true: int, pred: int, n: int = 1) -> None:
        self.counts[true - 1, pred - 1] += n

    def add_many(self, trues: Iterable[int], preds: Iterable[int]) -> None:
        for t, p in zip(trues, preds):
            self.add(t, p)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.m, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def recall(self) -> list[float]:
        rows = self.counts.sum(axis=1)
        return [float(self.counts[i, i] / r) if r else float("nan") for i, r in enumerate(rows)]

    def to_csv(self, names: dict[int, str] | None = None) -> str:
        names = names or {}
        lab = [names.get(i + 1, str(i + 1)) for i in range(self.m)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *lab, "recall"])
        for i, row in enumerate(self.counts):
            w.writerow([lab[i], *row.tolist(), f"{self.recall()[i]:.6f}"])
        w.writerow(["accuracy", f"{self.accuracy:.6f}"])
        return buf.getvalue()


@dataclass(frozen=True)
class PerturbationSpec:
    delay_ms: float = 0.0
    jitter_ms: float | None = None   # None means 10% of delay_ms
    loss_pct: float = 0.0
    rto_ms: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.delay_ms < 0 or (self.jitter_ms is not None and self.jitter_ms < 0):
            raise InvalidSpec("delay and jitter must be >= 0")
        if not 0 <= self.loss_pct < 100:
            raise InvalidSpec("loss_pct must be in [0, 100)")
        if self.rto_ms < 0:
            raise InvalidSpec("rto_ms must be >= 0")

    @property
    def jitter(self) -> float:
        return 0.1 * self.delay_ms if self.jitter_ms is None else self.jitter_ms

    def is_identity(self) -> bool:
        return self.delay_ms == 0 and self.jitter == 0 and self.loss_pct == 0

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> PerturbationSpec:
        """Parse ``delay=500,loss=10,jitter=50,rto=200,seed=1``."""
        keys = {"delay": "delay_ms", "jitter": "jitter_ms", "loss": "loss_pct",
                "rto": "rto_ms", "seed": "seed"}
        kw: dict = {"seed": seed}
        for part in filter(None, (p.strip() for p in text.split(","))):
            name, sep, val = part.partition("=")
            if not sep or name.strip() not in keys:
                raise InvalidSpec(f"bad perturbation term {part!r}")
            key = keys[name.strip()]
            try:
                kw[key] = int(val) if key == "seed" else float(val)
            except ValueError as exc:
                raise InvalidSpec(f"bad perturbation value {part!r}") from exc
        return cls(**kw)


def perturb_trace(records: Sequence[PacketRecord], spec: PerturbationSpec) -> list[PacketRecord]:
    """Add path delay and packet loss to the server->client side of a trace.

    Loss drops a downstream payload packet and re-sends a same-seq copy
    ``rto_ms`` later.  Delay adds ``delay_ms`` plus uniform jitter to every
    downstream packet while keeping each direction first-in first-out, as a
    single network path would.
    """
    if spec.is_identity():
        return list(records)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x9E37]))
    table = ConnectionTable()
    delay, jitter, rto = spec.delay_ms / 1e3, spec.jitter / 1e3, spec.rto_ms / 1e3
    p_loss = spec.loss_pct / 100.0
    keep: list[tuple[float, int, PacketRecord]] = []
    sends: list[tuple[float, int, PacketRecord]] = []
    for i, pkt in enumerate(records):
        flow, _ = table.match(pkt)
        if flow.direction(pkt) != DOWN:
            keep.append((pkt.timestamp, i, pkt))
            continue
        if p_loss and pkt.payload_len > 0 and pkt.seq is not None and rng.random() < p_loss:
            sends.append((pkt.timestamp + rto, i, pkt))
        else:
            sends.append((pkt.timestamp, i, pkt))
    sends.sort(key=lambda s: (s[0], s[1]))
    last_arrival: dict = {}
    for t_send, i, pkt in sends:
        arr = t_send + delay + (rng.uniform(0.0, jitter) if jitter else 0.0)
        arr = max(arr, last_arrival.get(pkt.tuple, arr))
        last_arrival[pkt.tuple] = arr
        moved = pkt if arr == pkt.timestamp else replace(pkt, timestamp=arr)
        keep.append((arr, i, moved))
    keep.sort(key=lambda s: (s[0], s[1]))
    return [p for _, _, p in keep]


@dataclass
class LabeledTrace:
    """Packet records plus whatever ground truth is known about them."""

    records: list
    title_id: str
    label: int | None = None          # trace label for fixed-quality captures
    truth: GroundTruth | None = None  # per-segment truth from the generator
    split: str = ""

    @classmethod
    def from_synthetic(cls, st: SyntheticTrace) -> LabeledTrace:
        return cls(st.records, st.title_id, st.label, st.truth, st.split)

    def label_at(self, start: float) -> int:
        """Ground-truth label of the segment whose download began nearest ``start``."""
        if self.truth is None:
            if self.label is None:
                raise InsufficientData(f"trace {self.title_id} has no labels")
            return self.label
        starts = np.asarray(self.truth.starts)
        return int(self.truth.labels[int(np.argmin(np.abs(starts - start)))])


@dataclass
class TraceFeatures:
    trace: LabeledTrace
    config: PipelineConfig
    flows: list = field(default_factory=list)

    @property
    def title_id(self) -> str:
        return self.trace.title_id

    @property
    def label(self) -> int | None:
        return self.trace.label

    def features(self) -> list[SegmentFeature]:
        return sorted((f for ff in self.flows for f in ff.features), key=lambda f: f.start)

    def video_peaks(self) -> list[Peak]:
        thr = self.config.features.audio_threshold_bits
        return sorted((p for ff in self.flows for p in video_peaks(ff.peaks, thr)),
                      key=lambda p: p.start)

    def samples(self, kind: str = "bitrate") -> tuple[list[float], list[int]]:
        """(feature values, true labels) for one feature kind."""
        if kind == "bitrate":
            fs = self.features()
            return [f.value for f in fs], [self.trace.label_at(f.start) for f in fs]
        if kind == "timediff":
            ps = self.video_peaks()
            if len(ps) < 2:
                return [], []
            starts = [p.start for p in ps]
            return ([b - a for a, b in zip(starts, starts[1:])],
                    [self.trace.label_at(s) for s in starts[1:]])
        raise ValueError(f"unknown feature kind {kind!r}")

    def with_features(self, fc: FeatureConfig) -> TraceFeatures:
        """Same flows with positional/threshold rules re-applied under ``fc``.

        Peaks only depend on the silence gap, which must be unchanged.
        """
        if fc.silence_gap_s != self.config.features.silence_gap_s:
            raise ConfigMismatch("silence gap change needs re-extraction")
        flows = [FlowFeatures(ff.flow_id, ff.info, ff.events, ff.peaks,
                              peaks_to_features(ff.peaks, fc.audio_threshold_bits,
                                                fc.drop_first, fc.drop_last))
                 for ff in self.flows]
        return TraceFeatures(self.trace, replace(self.config, features=fc), flows)


def extract_trace(trace: LabeledTrace, cfg: PipelineConfig = PipelineConfig(),
                  perturb: PerturbationSpec | None = None) -> TraceFeatures:
    recs = trace.records if perturb is None else perturb_trace(trace.records, perturb)
    return TraceFeatures(trace, cfg, extract_flows(recs, cfg))


def training_set(tfs: Sequence[TraceFeatures], kind: str = "bitrate", m: int = 3) -> TrainingSet:
    entries = []
    for tf in tfs:
        if tf.label is None:
            raise InsufficientData(f"training trace {tf.title_id} has no fixed label")
        values, _ = tf.samples(kind)
        entries.append(TrainingEntry(tf.title_id, tf.label, tuple(values)))
    return TrainingSet(entries, m)


def train(tfs: Sequence[TraceFeatures], k: int = DEFAULT_K, seed: int = DEFAULT_SEED,
          feature_kind: str = "bitrate", baseline: str | None = None,
          restarts: int = DEFAULT_RESTARTS, m: int | None = None,
          names: dict[int, str] | None = None) -> QualityModel:
    """Codebook and profiles, plus an optional baseline payload in the same envelope."""
    if not tfs:
        raise InsufficientData("no training traces")
    if feature_kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {feature_kind!r}")
    if baseline == "naive" and feature_kind != "bitrate":
        raise ValueError("the naive baseline only works on bit-rate features")
    fc = tfs[0].config.features
    if any(tf.config.features != fc for tf in tfs):
        raise ConfigMismatch("training traces extracted with different feature configs")
    m = m or max(tf.label for tf in tfs)
    ts = training_set(tfs, feature_kind, m)
    model = train_model(ts, k, seed, fc, names, restarts, feature_kind)
    if baseline == "naive":
        by_label: dict[int, list] = {}
        for tf in tfs:
            by_label.setdefault(tf.label, []).extend(p.total_bits for p in tf.video_peaks())
        model.baseline = fit_naive(by_label).to_dict()
    elif baseline == "lz78":
        model.baseline = fit_lz78([(e.label, e.values) for e in ts.entries],
                                  model.codebook, feature_kind).to_dict()
    elif baseline is not None:
        raise ValueError(f"unknown baseline {baseline!r}")
    return model


def _baseline(model: QualityModel, selector: str):
    if selector == "proposed":
        return None
    kind = (model.baseline or {}).get("kind")
    if kind != selector:
        raise ConfigMismatch(f"model carries no {selector} baseline (has {kind})")
    return NaiveModel.from_dict(model.baseline) if kind == "naive" else Lz78Model.from_dict(model.baseline)


def predict(tf: TraceFeatures, model: QualityModel, selector: str = "proposed",
            _bl=None) -> tuple[list[int], list[int]]:
    """(true labels, predicted labels) for every sample of one trace."""
    if model.feature_config != tf.config.features:
        raise ConfigMismatch(f"model feature config {model.feature_config} "
                             f"differs from extraction config {tf.config.features}")
    bl = _bl if _bl is not None else _baseline(model, selector)
    values, truth = tf.samples(model.feature_kind)
    if selector == "proposed":
        preds = [classify_value(v, model)[1] for v in values]
    elif selector == "naive":
        preds = [naive_classify(v, bl) for v in values]
    elif selector == "lz78":
        preds = [bl.classify(bl.codebook.quantize_many(values))] * len(values) if values else []
    else:
        raise ValueError(f"unknown classifier {selector!r}")
    return truth, preds


def evaluate(testset: Sequence[TraceFeatures], model: QualityModel,
             selector: str = "proposed") -> ConfusionMatrix:
    if not testset:
        raise EmptyTestSet("no test traces")
    bl = _baseline(model, selector)
    cm = ConfusionMatrix(model.m)
    for tf in testset:
        cm.add_many(*predict(tf, model, selector, bl))
    if cm.total == 0:
        raise EmptyTestSet("test traces produced no classifiable segments")
    return cm


def k_sweep(train_tfs: Sequence[TraceFeatures], test_tfs: Sequence[TraceFeatures],
            k_values: Sequence[int], seed: int = DEFAULT_SEED,
            feature_kind: str = "bitrate", restarts: int = DEFAULT_RESTARTS) -> list[dict]:
    if not k_values:
        raise ValueError("k_values is empty")
    rows = []
    for k in k_values:
        model = train(train_tfs, k, seed, feature_kind, restarts=restarts)
        rows.append({"k": k, "accuracy": evaluate(test_tfs, model).accuracy})
    return rows


def training_size_sweep(counts: Sequence[int], train_tfs: Sequence[TraceFeatures],
                        test_tfs: Sequence[TraceFeatures], seed: int = DEFAULT_SEED,
                        k: int = DEFAULT_K, restarts: int = DEFAULT_RESTARTS,
                        with_last: Sequence[bool] = (False, True)) -> list[dict]:
    """Accuracy versus number of training titles, with and without the last peak.

    Titles are subsampled once per count with a seeded generator, and the
    same subsample serves both settings of the last-peak toggle.
    """
    titles = sorted({tf.title_id for tf in train_tfs})
    if any(c < 1 or c > len(titles) for c in counts):
        raise ValueError(f"counts must lie in 1..{len(titles)}")
    rng = np.random.default_rng(seed)
    base = train_tfs[0].config.features
    rows = []
    for c in counts:
        chosen = set(rng.choice(titles, size=c, replace=False).tolist())
        sub = [tf for tf in train_tfs if tf.title_id in chosen]
        for keep_last in with_last:
            fc = replace(base, drop_last=not keep_last)
            tr = [tf.with_features(fc) for tf in sub]
            te = [tf.with_features(fc) for tf in test_tfs]
            model = train(tr, k, seed, restarts=restarts)
            rows.append({"n_titles": c, "with_last_peak": keep_last,
                         "accuracy": evaluate(te, model).accuracy})
    return rows


def robustness_grid(model: QualityModel, traces: Sequence[LabeledTrace],
                    delays_ms: Sequence[float], losses_pct: Sequence[float],
                    cfg: PipelineConfig | None = None, seed: int = 0,
                    selector: str = "proposed") -> list[dict]:
    """Accuracy for every (delay, loss) combination."""
    cfg = cfg or PipelineConfig(features=model.feature_config)
    rows = []
    for d in delays_ms:
        for loss in losses_pct:
            ps = PerturbationSpec(delay_ms=d, loss_pct=loss, seed=seed)
            tfs = [extract_trace(tr, cfg, replace(ps, seed=seed * 1_000_003 + i))
                   for i, tr in enumerate(traces)]
            rows.append({"delay_ms": d, "loss_pct": loss,
                         "accuracy": evaluate(tfs, model, selector).accuracy})
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
