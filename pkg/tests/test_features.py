import random

import pytest
from hypothesis import given, settings, strategies as st

from vidqual.features import (
    ByteEvent, FeatureConfig, FeatureFilter, Peak, PeakTracker, peaks_to_features,
    segment_bursts, video_peaks,
)


def _ev(ts, n=1000, fid=1):
    return ByteEvent(fid, ts, n)


def _peaks(mbits):
    return [Peak(1, i, 10.0 * i, 10.0 * i + 1, round(m * 1e6)) for i, m in enumerate(mbits)]


class TestSegmentBursts:
    def test_two_peaks(self):
        peaks = segment_bursts([_ev(t) for t in (0, 1, 2, 6, 7)], 3.0)
        assert [(p.start, p.end) for p in peaks] == [(0, 2), (6, 7)]
        assert [p.index for p in peaks] == [0, 1]

    def test_single_event(self):
        (p,) = segment_bursts([_ev(5, 1000)])
        assert p.total_bits == 8000 and p.start == p.end == 5

    def test_spacing_below_gap_is_one_peak(self):
        events = [_ev(0.0)]
        rng = random.Random(0)
        while events[-1].timestamp < 60:
            events.append(_ev(events[-1].timestamp + rng.uniform(0.1, 2.9)))
        assert max(b.timestamp - a.timestamp for a, b in zip(events, events[1:])) <= 3.0
        assert len(segment_bursts(events)) == 1

    def test_gap_exactly_threshold_does_not_split(self):
        assert len(segment_bursts([_ev(0), _ev(3.0)])) == 1

    def test_empty(self):
        assert segment_bursts([]) == []

    def test_bad_gap(self):
        with pytest.raises(ValueError):
            segment_bursts([_ev(0)], 0)


class TestPeaksToFeatures:
    def test_rule_order(self):
        feats = peaks_to_features(_peaks([0.2, 4.1, 4.3, 3.9, 0.7]))
        assert [f.value / 1e6 for f in feats] == [4.1, 4.3, 3.9]

    def test_positional_drop_precedes_threshold(self):
        # the last big peak is dropped for position even though an audio peak follows
        feats = peaks_to_features(_peaks([3.0, 2.0, 0.1, 2.5]))
        assert [f.peak_index for f in feats] == [1]

    def test_empty(self):
        assert peaks_to_features([]) == []

    def test_two_peaks_exhausted(self):
        assert peaks_to_features(_peaks([2.0, 3.0])) == []

    def test_threshold_is_strict(self):
        assert peaks_to_features(_peaks([1.0]), drop_first=False, drop_last=False) == []

    def test_no_drops(self):
        feats = peaks_to_features(_peaks([2.0, 3.0]), drop_first=False, drop_last=False)
        assert len(feats) == 2 and feats[0].duration == 1

    def test_video_peaks(self):
        assert [p.index for p in video_peaks(_peaks([0.2, 2.0, 0.9, 1.5]), 1e6)] == [1, 3]


_times = st.lists(st.floats(0, 200, allow_nan=False), min_size=1, max_size=60).map(sorted)


@settings(max_examples=150, deadline=None)
@given(_times, st.lists(st.integers(0, 3000), min_size=60, max_size=60))
def test_bits_conserved(ts, sizes):
    events = [_ev(t, n) for t, n in zip(ts, sizes)]
    peaks = segment_bursts(events)
    assert sum(p.total_bits for p in peaks) == 8 * sum(e.new_bytes for e in events)
    for a, b in zip(peaks, peaks[1:]):
        assert b.start - a.end > 3.0


@settings(max_examples=150, deadline=None)
@given(_times, _times)
def test_concatenation_with_long_silence(a, b):
    """Two streams separated by more than the gap segment independently."""
    shift = a[-1] + 3.5 - b[0]
    ea = [_ev(t) for t in a]
    eb = [_ev(t + shift) for t in b]
    joined = segment_bursts(ea + eb)
    sep = segment_bursts(ea) + segment_bursts(eb)
    assert [(p.start, p.end, p.total_bits) for p in joined] == \
           [(p.start, p.end, p.total_bits) for p in sep]


@settings(max_examples=150, deadline=None)
@given(_times, st.floats(0.5, 5))
def test_tracker_matches_batch(ts, gap):
    events = [_ev(t, 100) for t in ts]
    tr = PeakTracker(1, gap)
    got = [p for p in (tr.push(e) for e in events) if p]
    tail = tr.close()
    if tail:
        got.append(tail)
    assert got == segment_bursts(events, gap)


def test_tracker_poll_deadline():
    tr = PeakTracker(1, 3.0)
    tr.push(_ev(1.0))
    assert tr.deadline == 4.0
    assert tr.poll(4.0) is None
    p = tr.poll(4.001)
    assert p is not None and p.index == 0 and tr.deadline is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.05, 5.0), max_size=12), st.booleans(), st.booleans(), st.booleans())
def test_filter_matches_batch(mbits, df, dl, open_tail):
    cfg = FeatureConfig(drop_first=df, drop_last=dl)
    peaks = _peaks(mbits)
    ff = FeatureFilter(cfg)
    emitted = [f for f in (ff.on_peak(p) for p in (peaks[:-1] if open_tail else peaks)) if f]
    emit, retract = ff.close(peaks[-1] if open_tail and peaks else None)
    if emit:
        emitted.append(emit)
    if retract:
        emitted.remove(retract)
    assert emitted == peaks_to_features(peaks, cfg.audio_threshold_bits, df, dl)


def test_config_round_trip():
    cfg = FeatureConfig(2.5, 5e5, False, True)
    assert FeatureConfig.from_dict(cfg.to_dict()) == cfg
