"""Silence-delimited traffic bursts ("peaks") and per-segment bit features."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True, slots=True)
class FeatureConfig:
    silence_gap_s: float = 3.0
    audio_threshold_bits: float = 1_000_000
    drop_first: bool = True
    drop_last: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FeatureConfig:
        return cls(silence_gap_s=float(d["silence_gap_s"]),
                   audio_threshold_bits=float(d["audio_threshold_bits"]),
                   drop_first=bool(d["drop_first"]),
                   drop_last=bool(d["drop_last"]))


@dataclass(frozen=True, slots=True)
class ByteEvent:
    flow_id: int
    timestamp: float
    new_bytes: int


@dataclass(frozen=True, slots=True)
class Peak:
    flow_id: int
    index: int
    start: float
    end: float
    total_bits: int


@dataclass(frozen=True, slots=True)
class SegmentFeature:
    flow_id: int
    peak_index: int
    value: float
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


def segment_bursts(events: Iterable[ByteEvent], silence_gap: float = 3.0) -> list[Peak]:
    """Group time-ordered byte events into peaks.

    An event joins the open peak when it follows the previous event by at
    most ``silence_gap`` seconds; a longer silence starts a new peak.
    """
    if silence_gap <= 0:
        raise ValueError("silence_gap must be positive")
    peaks: list[Peak] = []
    flow_id = start = last = None
    nbytes = 0
    for ev in events:
        if last is not None and ev.timestamp - last > silence_gap:
            peaks.append(Peak(flow_id, len(peaks), start, last, 8 * nbytes))
            last = None
        if last is None:
            flow_id, start, nbytes = ev.flow_id, ev.timestamp, 0
        nbytes += ev.new_bytes
        last = ev.timestamp
    if last is not None:
        peaks.append(Peak(flow_id, len(peaks), start, last, 8 * nbytes))
    return peaks


def peak_to_feature(p: Peak) -> SegmentFeature:
    return SegmentFeature(p.flow_id, p.index, float(p.total_bits), p.start, p.end)


def peaks_to_features(peaks: Sequence[Peak],
                      audio_threshold: float = 1_000_000,
                      drop_first: bool = True,
                      drop_last: bool = True) -> list[SegmentFeature]:
    """Positional drops (first/last peak) first, then the audio threshold."""
    kept = list(peaks)
    if drop_first and kept:
        kept = kept[1:]
    if drop_last and kept:
        kept = kept[:-1]
    return [peak_to_feature(p) for p in kept if p.total_bits > audio_threshold]


def video_peaks(peaks: Iterable[Peak], audio_threshold: float) -> list[Peak]:
    """Peaks above the audio threshold, regardless of position."""
    return [p for p in peaks if p.total_bits > audio_threshold]


class PeakTracker:
    """Incremental ``segment_bursts`` for one flow.

    A peak is final once the clock moves strictly past ``deadline``
    (last event + silence gap); ``poll`` reports it at that moment.
    """

    __slots__ = ("flow_id", "silence_gap", "n_peaks", "_start", "_last", "_bytes")

    def __init__(self, flow_id: int, silence_gap: float = 3.0):
        self.flow_id = flow_id
        self.silence_gap = silence_gap
        self.n_peaks = 0
        self._start: float | None = None
        self._last: float | None = None
        self._bytes = 0

    @property
    def deadline(self) -> float | None:
        return None if self._last is None else self._last + self.silence_gap

    def _finish(self) -> Peak:
        p = Peak(self.flow_id, self.n_peaks, self._start, self._last, 8 * self._bytes)
        self.n_peaks += 1
        self._start = self._last = None
        self._bytes = 0
        return p

    def push(self, ev: ByteEvent) -> Peak | None:
        done = None
        if self._last is not None and ev.timestamp - self._last > self.silence_gap:
            done = self._finish()
        if self._last is None:
            self._start = ev.timestamp
        self._bytes += ev.new_bytes
        self._last = ev.timestamp
        return done

    def poll(self, now: float) -> Peak | None:
        if self._last is not None and now - self._last > self.silence_gap:
            return self._finish()
        return None

    def close(self) -> Peak | None:
        return self._finish() if self._last is not None else None


class FeatureFilter:
    """Streaming counterpart of ``peaks_to_features`` for one flow.

    Whether a peak is the flow's last is only known when the flow ends, so
    with ``drop_last`` the final emitted feature is withdrawn by ``close``.
    """

    __slots__ = ("cfg", "_last_peak", "_last_emitted")

    def __init__(self, cfg: FeatureConfig):
        self.cfg = cfg
        self._last_peak: Peak | None = None
        self._last_emitted: SegmentFeature | None = None

    def on_peak(self, peak: Peak) -> SegmentFeature | None:
        self._last_peak = peak
        if self.cfg.drop_first and peak.index == 0:
            return None
        if peak.total_bits <= self.cfg.audio_threshold_bits:
            return None
        f = peak_to_feature(peak)
        self._last_emitted = f
        return f

    def close(self, open_peak: Peak | None) -> tuple[SegmentFeature | None, SegmentFeature | None]:
        """Finish the flow; returns ``(emit, retract)``.

        ``open_peak`` is a peak still open at flow end.  It is the last peak,
        so under ``drop_last`` it is swallowed; otherwise the most recently
        finalized peak was last and its feature, if emitted, is retracted.
        """
        if open_peak is not None:
            if self.cfg.drop_last:
                self._last_peak = open_peak
                return None, None
            return self.on_peak(open_peak), None
        last, emitted = self._last_peak, self._last_emitted
        if (self.cfg.drop_last and last is not None and emitted is not None
                and emitted.peak_index == last.index):
            return None, emitted
        return None, None
