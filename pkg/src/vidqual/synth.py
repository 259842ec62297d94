"""Synthetic DASH-over-TLS packet traces with per-segment ground truth.

Each trace is one client downloading a title: a TCP handshake, a
ClientHello naming the video domain, then one burst of MTU-sized packets
per media segment.  Bursts are separated by more than the silence gap, and
small audio bursts are interleaved.  A decoy TLS flow to an unrelated host
and a DNS exchange are mixed in, so gating is exercised too.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .buffer import levels_at_completions
from .dpi import build_client_hello
from .errors import InvalidSpec, IoFailure
from .flow import FiveTuple, PacketRecord, Transport, seq_add
from .records import write_jsonl, write_pcap

SPLITS = ("train", "test-fixed-train-titles", "test-adaptive-train-titles",
          "test-adaptive-test-titles")
_SPLIT_CODE = {s: i for i, s in enumerate(SPLITS)}

LINK_RATE_BPS = 10e6
RTT_S = 0.03
ACK_EVERY = 8

_FLAGS = {("ACK",): frozenset({"ACK"})}


@dataclass(frozen=True)
class QualitySpec:
    label: int
    name: str
    mean_bits: float
    std_bits: float


DEFAULT_QUALITIES = (
    QualitySpec(1, "360P", 1.2e6, 0.25e6),
    QualitySpec(2, "480P", 2.0e6, 0.40e6),
    QualitySpec(3, "720P", 4.0e6, 0.80e6),
)


@dataclass(frozen=True)
class FixedMode:
    label: int

    def labels(self, n: int, rng: np.random.Generator) -> list[int]:
        return [self.label] * n


@dataclass(frozen=True)
class AdaptiveMode:
    """Either an explicit per-segment ``schedule``, or one switch from
    ``from_label`` to ``to_label`` at a random segment index."""

    schedule: tuple | None = None
    from_label: int = 1
    to_label: int = 3

    def labels(self, n: int, rng: np.random.Generator) -> list[int]:
        if self.schedule is not None:
            return list(self.schedule)
        at = int(rng.integers(2, max(3, n - 2)))
        return [self.from_label] * at + [self.to_label] * (n - at)


def switch_points(labels: Sequence[int]) -> list[int]:
    """Indices where the label differs from its predecessor."""
    return [i for i in range(1, len(labels)) if labels[i] != labels[i - 1]]


def _mode_to_dict(mode) -> dict:
    if isinstance(mode, FixedMode):
        return {"kind": "fixed", "label": mode.label}
    return {"kind": "adaptive", "schedule": None if mode.schedule is None else list(mode.schedule),
            "from_label": mode.from_label, "to_label": mode.to_label}


def _mode_from_dict(d: dict):
    if d.get("kind") == "fixed":
        return FixedMode(int(d["label"]))
    if d.get("kind") == "adaptive":
        sch = d.get("schedule")
        return AdaptiveMode(None if sch is None else tuple(int(x) for x in sch),
                            int(d.get("from_label", 1)), int(d.get("to_label", 3)))
    raise InvalidSpec(f"unknown mode {d!r}")


@dataclass(frozen=True)
class TraceSpec:
    n_titles: int = 40
    qualities: tuple = DEFAULT_QUALITIES
    segment_duration_s: float = 4.0
    segments_per_title: int = 12
    mode: FixedMode | AdaptiveMode = FixedMode(1)
    audio_mean_bits: float = 0.12e6
    audio_period_s: float = 20.0
    packet_size: int = 1460
    silence_gap_s: float = 3.0
    gap_jitter_s: tuple = (0.2, 1.0)
    # video draws below this are redrawn so no segment reads as audio
    video_floor_bits: float = 1.05e6
    retrans_rate: float = 0.0
    decoy: bool = True
    n_adaptive_seen: int = 5
    n_adaptive_unseen: int = 5
    video_domain: str = "r4---sn-4g5e6nsz.googlevideo.com"
    seed: int = 0

    def validate(self) -> None:
        qs = self.qualities
        if not qs:
            raise InvalidSpec("no qualities")
        labels = [q.label for q in qs]
        if labels != list(range(1, len(qs) + 1)):
            raise InvalidSpec(f"quality labels must be 1..m in order, got {labels}")
        means = [q.mean_bits for q in qs]
        if any(b <= a for a, b in zip(means, means[1:])):
            raise InvalidSpec("quality means must increase with label")
        if any(q.std_bits <= 0 for q in qs):
            raise InvalidSpec("quality std must be positive")
        if any(q.mean_bits + 2 * q.std_bits <= self.video_floor_bits for q in qs):
            raise InvalidSpec("a quality lies entirely below the video floor")
        if self.n_titles < 1 or self.segments_per_title < 1:
            raise InvalidSpec("n_titles and segments_per_title must be >= 1")
        if self.segment_duration_s <= 0 or self.silence_gap_s <= 0:
            raise InvalidSpec("durations must be positive")
        lo, hi = self.gap_jitter_s
        if not 0 < lo <= hi:
            raise InvalidSpec("gap jitter must satisfy 0 < lo <= hi")
        if not 0 < self.packet_size <= 65000:
            raise InvalidSpec("packet_size out of range")
        if not 0 <= self.retrans_rate < 1:
            raise InvalidSpec("retrans_rate must be in [0, 1)")
        if self.audio_mean_bits < 0 or self.audio_period_s <= 0:
            raise InvalidSpec("bad audio parameters")
        if self.n_adaptive_seen > self.n_titles:
            raise InvalidSpec("more seen-title adaptive traces than titles")
        m = len(qs)
        if isinstance(self.mode, FixedMode):
            if not 1 <= self.mode.label <= m:
                raise InvalidSpec(f"fixed label {self.mode.label} outside 1..{m}")
        elif isinstance(self.mode, AdaptiveMode):
            mode = self.mode
            if mode.schedule is not None:
                if len(mode.schedule) != self.segments_per_title:
                    raise InvalidSpec("schedule length must equal segments_per_title")
                if any(not 1 <= y <= m for y in mode.schedule):
                    raise InvalidSpec("schedule label out of range")
            elif not (1 <= mode.from_label <= m and 1 <= mode.to_label <= m):
                raise InvalidSpec("switch labels out of range")
        else:
            raise InvalidSpec(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["qualities"] = [asdict(q) for q in self.qualities]
        d["mode"] = _mode_to_dict(self.mode)
        d["gap_jitter_s"] = list(self.gap_jitter_s)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TraceSpec:
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown spec keys: {sorted(extra)}")
        kw = dict(d)
        try:
            if "qualities" in kw:
                kw["qualities"] = tuple(QualitySpec(int(q["label"]), str(q["name"]),
                                                    float(q["mean_bits"]), float(q["std_bits"]))
                                        for q in kw["qualities"])
            if "mode" in kw:
                kw["mode"] = _mode_from_dict(kw["mode"])
            if "gap_jitter_s" in kw:
                kw["gap_jitter_s"] = tuple(float(x) for x in kw["gap_jitter_s"])
            spec = cls(**kw)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad trace spec: {exc}") from exc
        spec.validate()
        return spec


@dataclass
class GroundTruth:
    title_id: str
    mode: str
    labels: list
    bits: list          # exact accepted bits of each video peak
    starts: list
    ends: list
    buffer_truth: list  # player buffer level right after each completion
    segment_duration_s: float
    audio_peaks: int = 0
    raw_down_bytes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruth:
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in keys})


def _title_index(title_id: str | int) -> int:
    if isinstance(title_id, int):
        return title_id
    digits = "".join(ch for ch in title_id if ch.isdigit())
    return int(digits) if digits else zlib.crc32(title_id.encode())


def _trace_rng(spec: TraceSpec, title_id, split: str) -> np.random.Generator:
    mode = spec.mode
    tag = mode.label if isinstance(mode, FixedMode) else 100 + mode.to_label
    ss = np.random.SeedSequence([spec.seed, _SPLIT_CODE.get(split, 9),
                                 _title_index(title_id), tag])
    return np.random.default_rng(ss)


def _draw_bits(q: QualitySpec, floor: float, rng: np.random.Generator) -> float:
    """Normal draw truncated to mean +- 2 std and to at least ``floor``."""
    lo = max(q.mean_bits - 2 * q.std_bits, floor)
    hi = q.mean_bits + 2 * q.std_bits
    while True:
        x = rng.normal(q.mean_bits, q.std_bits)
        if lo <= x <= hi:
            return x


class _Conn:
    """Builds the packets of one TCP connection."""

    def __init__(self, client: str, cport: int, server: str, sport: int,
                 rng: np.random.Generator, out: list):
        self.up = FiveTuple(Transport.TCP, client, server, cport, sport)
        self.down = self.up.reversed()
        self.cseq = int(rng.integers(0, 1 << 32))
        self.sseq = int(rng.integers(0, 1 << 32))
        self.out = out

    def _emit(self, t, up, seq, ack, n, flags, payload=None):
        self.out.append(PacketRecord(round(t, 6), self.up if up else self.down, seq, ack, n,
                                     _FLAGS.get(flags) or frozenset(flags), payload))

    def handshake(self, t: float) -> float:
        self._emit(t, True, self.cseq, None, 0, ("SYN",))
        self.cseq = seq_add(self.cseq, 1)
        self._emit(t + RTT_S / 2, False, self.sseq, self.cseq, 0, ("SYN", "ACK"))
        self.sseq = seq_add(self.sseq, 1)
        self._emit(t + RTT_S, True, self.cseq, self.sseq, 0, ("ACK",))
        return t + RTT_S

    def send_up(self, t: float, n: int, payload: bytes | None = None) -> None:
        self._emit(t, True, self.cseq, self.sseq, n, ("ACK", "PSH"), payload)
        self.cseq = seq_add(self.cseq, n)

    def send_down(self, t: float, nbytes: int, mss: int, rng: np.random.Generator,
                  dup_rate: float, dup_rng: np.random.Generator) -> tuple[float, int]:
        """Burst of ``nbytes`` at link rate; returns (last timestamp, raw bytes sent)."""
        npk = -(-nbytes // mss)
        sizes = [mss] * (npk - 1) + [nbytes - mss * (npk - 1)]
        spacing = mss * 8 / LINK_RATE_BPS * rng.uniform(0.8, 1.2, npk - 1)
        times = np.concatenate(([t], t + np.cumsum(spacing))).tolist()
        dups = (dup_rng.random(npk) < dup_rate).tolist() if dup_rate else [False] * npk
        raw = 0
        for k, (n, ts, dup) in enumerate(zip(sizes, times, dups), 1):
            self._emit(ts, False, self.sseq, self.cseq, n, ("ACK",))
            raw += n
            if dup:
                self._emit(ts, False, self.sseq, self.cseq, n, ("ACK",))
                raw += n
            self.sseq = seq_add(self.sseq, n)
            if k % ACK_EVERY == 0 or k == npk:
                self._emit(ts + RTT_S / 2, True, self.cseq, self.sseq, 0, ("ACK",))
        return round(times[-1], 6), raw

    def close(self, t: float) -> None:
        self._emit(t, False, self.sseq, self.cseq, 0, ("FIN", "ACK"))
        self._emit(t + RTT_S / 2, True, self.cseq, seq_add(self.sseq, 1), 0, ("FIN", "ACK"))


def generate_trace(spec: TraceSpec, title_id: str | int = 0, split: str = "train"
                   ) -> tuple[list[PacketRecord], GroundTruth]:
    """One download of ``title_id`` under ``spec.mode``; records are time-ordered."""
    spec.validate()
    rng = _trace_rng(spec, title_id, split)
    dup_rng = np.random.default_rng(rng.integers(1 << 63))
    n = spec.segments_per_title
    labels = spec.mode.labels(n, rng)
    quals = {q.label: q for q in spec.qualities}
    idx = _title_index(title_id)
    client = f"10.{(idx >> 8) & 255}.{idx & 255}.{int(rng.integers(2, 250))}"
    server = f"203.0.113.{int(rng.integers(1, 255))}"
    cport = int(rng.integers(32768, 60000))

    out: list[PacketRecord] = []
    t0 = round(float(rng.uniform(0.0, 1.0)), 6)
    conn = _Conn(client, cport, server, 443, rng, out)
    t = conn.handshake(t0)
    hello = build_client_hello(spec.video_domain, random=rng.bytes(32))
    conn.send_up(t, len(hello), hello)
    mss = spec.packet_size
    hs_bytes = int(rng.integers(3000, 5001))
    hs_start = round(t + RTT_S / 2, 6)
    t_hs, raw_total = conn.send_down(hs_start, hs_bytes, mss, rng, spec.retrans_rate, dup_rng)
    conn.send_up(t_hs + RTT_S / 2, int(rng.integers(60, 130)))

    bits, starts, ends = [], [], []
    n_audio = 0
    last_audio = t0
    t = t_hs + RTT_S
    gap_lo, gap_hi = spec.gap_jitter_s
    for i, y in enumerate(labels):
        draw = _draw_bits(quals[y], spec.video_floor_bits, rng)
        if i == 0:
            draw *= rng.uniform(0.5, 1.5)
        elif i == n - 1 and n > 1:
            draw *= rng.uniform(0.3, 1.0)
        nbytes = max(int(round(max(draw, spec.video_floor_bits) / 8)), 1)
        conn.send_up(t, int(rng.integers(300, 601)))
        start = round(t + RTT_S / 2, 6)
        end, raw = conn.send_down(start, nbytes, mss, rng, spec.retrans_rate, dup_rng)
        raw_total += raw
        if i == 0:
            start = hs_start
            nbytes += hs_bytes
        bits.append(8 * nbytes)
        starts.append(start)
        ends.append(end)
        t = end + spec.silence_gap_s + rng.uniform(gap_lo, gap_hi) - RTT_S / 2
        if 0 < i < n - 1 and spec.audio_mean_bits > 0 and end - last_audio >= spec.audio_period_s:
            abytes = max(1, int(round(spec.audio_mean_bits * rng.uniform(0.8, 1.2) / 8)))
            conn.send_up(t, int(rng.integers(300, 601)))
            aend, raw = conn.send_down(t + RTT_S / 2, abytes, mss, rng, spec.retrans_rate, dup_rng)
            raw_total += raw
            n_audio += 1
            last_audio = aend
            t = aend + spec.silence_gap_s + rng.uniform(gap_lo, gap_hi) - RTT_S / 2
    conn.close(ends[-1] + float(rng.uniform(0.5, 2.0)))

    if spec.decoy:
        _decoy_traffic(client, t0, ends[-1], rng, out, mss)
    out.sort(key=lambda r: r.timestamp)
    gt = GroundTruth(
        title_id=str(title_id),
        mode="fixed" if isinstance(spec.mode, FixedMode) else "adaptive",
        labels=labels, bits=bits, starts=starts, ends=ends,
        buffer_truth=levels_at_completions(ends, spec.segment_duration_s),
        segment_duration_s=spec.segment_duration_s,
        audio_peaks=n_audio, raw_down_bytes=raw_total,
    )
    return out, gt


def _decoy_traffic(client: str, t0: float, t_end: float, rng: np.random.Generator,
                   out: list, mss: int) -> None:
    dns = FiveTuple(Transport.UDP, client, "192.0.2.53", int(rng.integers(1024, 65535)), 53)
    out.append(PacketRecord(round(t0, 6), dns, None, None, 40))
    out.append(PacketRecord(round(t0 + 0.01, 6), dns.reversed(), None, None, 120))
    conn = _Conn(client, int(rng.integers(60001, 65535)), "198.51.100.7", 443, rng, out)
    t = conn.handshake(t0 + 0.2)
    hello = build_client_hello("www.example.com", random=rng.bytes(32))
    conn.send_up(t, len(hello), hello)
    t += RTT_S
    noop = np.random.default_rng(0)
    while t < t_end:
        end, _ = conn.send_down(t, int(rng.integers(20_000, 400_000)), mss, rng, 0.0, noop)
        t = end + float(rng.uniform(2.0, 8.0))
    conn.close(t)


@dataclass
class SyntheticTrace:
    split: str
    title_id: str
    records: list
    truth: GroundTruth

    @property
    def label(self) -> int | None:
        ls = set(self.truth.labels)
        return ls.pop() if self.truth.mode == "fixed" and len(ls) == 1 else None


def _title_name(i: int) -> str:
    return f"title{i:03d}"


def dataset_plan(spec: TraceSpec) -> list[tuple[str, str, TraceSpec]]:
    """(split, title_id, per-trace spec) for every trace of the dataset."""
    spec.validate()
    plan = []
    m = len(spec.qualities)
    for split in SPLITS[:2]:
        for i in range(spec.n_titles):
            for y in range(1, m + 1):
                plan.append((split, _title_name(i), replace(spec, mode=FixedMode(y))))
    adaptive = spec.mode if isinstance(spec.mode, AdaptiveMode) else AdaptiveMode()
    for i in range(spec.n_adaptive_seen):
        plan.append((SPLITS[2], _title_name(i), replace(spec, mode=adaptive)))
    for i in range(spec.n_adaptive_unseen):
        plan.append((SPLITS[3], _title_name(spec.n_titles + i), replace(spec, mode=adaptive)))
    return plan


def build_dataset(spec: TraceSpec, splits: Sequence[str] = SPLITS) -> list[SyntheticTrace]:
    """Generate the dataset in memory."""
    out = []
    for split, title, s in dataset_plan(spec):
        if split in splits:
            recs, gt = generate_trace(s, title, split)
            out.append(SyntheticTrace(split, title, recs, gt))
    return out


def trace_filename(split: str, title_id: str, truth: GroundTruth) -> str:
    if truth.mode == "fixed":
        return f"{split}/{title_id}_q{truth.labels[0]}.jsonl"
    return f"{split}/{title_id}_adaptive.jsonl"


def generate_dataset(spec: TraceSpec, out_dir: str | Path, pcap: bool = False) -> dict:
    """Write every trace as JSONL (and optionally pcap) plus ``manifest.json``."""
    root = Path(out_dir)
    entries = []
    try:
        for split in SPLITS:
            (root / split).mkdir(parents=True, exist_ok=True)
        for split, title, s in dataset_plan(spec):
            recs, gt = generate_trace(s, title, split)
            rel = trace_filename(split, title, gt)
            with open(root / rel, "w") as fp:
                write_jsonl(recs, fp)
            entry = {"path": rel, "split": split, **gt.to_dict()}
            if pcap:
                prel = rel[:-len(".jsonl")] + ".pcap"
                with open(root / prel, "wb") as fp:
                    write_pcap(recs, fp)
                entry["pcap"] = prel
            entries.append(entry)
        manifest = {"spec": spec.to_dict(), "traces": entries}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise IoFailure(f"writing dataset to {root}: {exc}") from exc
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IoFailure(f"{path}: no manifest") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path}: unreadable manifest ({exc})") from exc
