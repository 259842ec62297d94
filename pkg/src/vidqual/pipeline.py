"""Connection matching + DPI gating + feature creation, batch and streaming.

Both modes share ``FlowGate`` (so flow partition and retransmission
filtering are identical) and differ only in how peaks are formed: batch
mode segments each flow's full event list, streaming mode finalizes peaks
on a virtual clock as silence accumulates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .dpi import DEFAULT_MATCH_DOMAINS, extract_sni, is_youtube_video
from .errors import MalformedHello, TruncatedHello
from .features import (
    ByteEvent, FeatureConfig, FeatureFilter, Peak, PeakTracker, SegmentFeature,
    peaks_to_features, segment_bursts, video_peaks,
)
from .flow import DOWN, UP, ConnectionTable, DpiStatus, FlowState, PacketRecord, Transport, accept_payload

log = logging.getLogger(__name__)

HELLO_LIMIT = 4096


@dataclass(frozen=True)
class PipelineConfig:
    features: FeatureConfig = FeatureConfig()
    match_domains: tuple = DEFAULT_MATCH_DOMAINS
    anchored: bool = False
    idle_timeout_s: float = 60.0


@dataclass
class FlowInfo:
    flow_id: int
    server: str
    client: str
    sni: str | None
    first_seen: float


class FlowGate:
    """Turns packets into server->client ByteEvents for flows DPI marks as video.

    Downstream bytes seen while a flow is still Pending are held back and
    released once the ClientHello decides the flow.
    """

    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        self.cfg = cfg
        self.table = ConnectionTable()
        self.info: dict[int, FlowInfo] = {}
        self._held: dict[int, list[ByteEvent]] = {}
        self._next_sweep: float | None = None
        self.evicted: list[FlowState] = []

    def _inspect(self, flow: FlowState, pkt: PacketRecord) -> None:
        if pkt.payload is None:
            # payload not retained: the hello cannot be inspected
            flow.dpi_status = DpiStatus.NON_VIDEO
            return
        flow.hello_buf += pkt.payload
        try:
            res = extract_sni(bytes(flow.hello_buf))
        except TruncatedHello:
            if len(flow.hello_buf) >= HELLO_LIMIT:
                flow.dpi_status = DpiStatus.NON_VIDEO
            return
        except MalformedHello as exc:
            log.debug("flow %d: malformed ClientHello: %s", flow.flow_id, exc)
            flow.dpi_status = DpiStatus.NON_VIDEO
            return
        flow.sni = res.hostname
        ok = is_youtube_video(res.hostname, self.cfg.match_domains, self.cfg.anchored)
        flow.dpi_status = DpiStatus.VIDEO if ok else DpiStatus.NON_VIDEO

    def feed(self, pkt: PacketRecord) -> list[ByteEvent]:
        now = pkt.timestamp
        flow = self.table.lookup(pkt.tuple)
        if flow is not None and now - flow.last_activity > self.cfg.idle_timeout_s:
            self._evict([self.table.remove(flow.flow_id)])
            flow = None
        if self._next_sweep is None or now >= self._next_sweep:
            self.sweep(now)
        if flow is None:
            flow, _ = self.table.match(pkt)
            self.info[flow.flow_id] = FlowInfo(flow.flow_id, flow.server_addr,
                                               flow.client_addr, None, now)
            if flow.tuple.transport is not Transport.TCP:
                flow.dpi_status = DpiStatus.NON_VIDEO
        status = flow.dpi_status
        if status is DpiStatus.NON_VIDEO:
            accept_payload(flow, pkt)
            return []
        direction = DOWN if pkt.tuple == flow.tuple else UP
        if status is DpiStatus.VIDEO:
            new = accept_payload(flow, pkt)
            if new > 0 and direction == DOWN:
                return [ByteEvent(flow.flow_id, now, new)]
            return []
        # Pending: the ClientHello has not decided the flow yet
        if direction == UP and pkt.payload_len > 0:
            self._inspect(flow, pkt)
            if flow.dpi_status is not DpiStatus.PENDING:
                flow.hello_buf = bytearray()
                self.info[flow.flow_id].sni = flow.sni
        new = accept_payload(flow, pkt)
        out: list[ByteEvent] = []
        if flow.dpi_status is DpiStatus.VIDEO:
            out.extend(self._held.pop(flow.flow_id, ()))
        elif flow.dpi_status is DpiStatus.NON_VIDEO:
            self._held.pop(flow.flow_id, None)
        if new > 0 and direction == DOWN:
            ev = ByteEvent(flow.flow_id, now, new)
            if flow.dpi_status is DpiStatus.VIDEO:
                out.append(ev)
            elif flow.dpi_status is DpiStatus.PENDING:
                self._held.setdefault(flow.flow_id, []).append(ev)
        return out

    def _evict(self, gone: list[FlowState]) -> None:
        for f in gone:
            self._held.pop(f.flow_id, None)
        self.evicted.extend(gone)

    def sweep(self, now: float) -> None:
        """Evict idle flows, at most once per second of capture time."""
        if self._next_sweep is not None and now < self._next_sweep:
            return
        self._next_sweep = now + 1.0
        self._evict(self.table.expire(now, self.cfg.idle_timeout_s))

    def drain_evicted(self) -> list[FlowState]:
        out, self.evicted = self.evicted, []
        return out

    def is_video(self, flow_id: int) -> bool:
        f = self.table.flows.get(flow_id)
        return f is not None and f.dpi_status is DpiStatus.VIDEO


@dataclass
class FlowFeatures:
    flow_id: int
    info: FlowInfo
    events: list[ByteEvent] = field(default_factory=list)
    peaks: list[Peak] = field(default_factory=list)
    features: list[SegmentFeature] = field(default_factory=list)

    def video_peaks(self, audio_threshold: float) -> list[Peak]:
        return video_peaks(self.peaks, audio_threshold)


def extract_flows(records: Iterable[PacketRecord],
                  cfg: PipelineConfig = PipelineConfig()) -> list[FlowFeatures]:
    """Batch extraction: every video flow with its events, peaks and features."""
    gate = FlowGate(cfg)
    flows: dict[int, FlowFeatures] = {}
    for pkt in records:
        gate.evicted.clear()
        for ev in gate.feed(pkt):
            ff = flows.get(ev.flow_id)
            if ff is None:
                ff = flows[ev.flow_id] = FlowFeatures(ev.flow_id, gate.info[ev.flow_id])
            ff.events.append(ev)
    fc = cfg.features
    for ff in flows.values():
        ff.peaks = segment_bursts(ff.events, fc.silence_gap_s)
        ff.features = peaks_to_features(ff.peaks, fc.audio_threshold_bits,
                                        fc.drop_first, fc.drop_last)
    return sorted(flows.values(), key=lambda f: f.flow_id)


@dataclass(frozen=True, slots=True)
class Emission:
    """A streaming result: a new feature, or the retraction of an earlier one."""

    at: float
    feature: SegmentFeature
    retract: bool = False


class StreamingExtractor:
    """Real-time feature creation driven by packet timestamps.

    Call ``feed`` per packet, ``advance`` to move the virtual clock through
    silence, and ``close`` at end of input.  Each returns the emissions it
    produced, stamped with the virtual time they became available.
    """

    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        self.cfg = cfg
        self.gate = FlowGate(cfg)
        self._trackers: dict[int, PeakTracker] = {}
        self._filters: dict[int, FeatureFilter] = {}
        self.now = float("-inf")

    def _flow(self, flow_id: int) -> tuple[PeakTracker, FeatureFilter]:
        tr = self._trackers.get(flow_id)
        if tr is None:
            tr = self._trackers[flow_id] = PeakTracker(flow_id, self.cfg.features.silence_gap_s)
            self._filters[flow_id] = FeatureFilter(self.cfg.features)
        return tr, self._filters[flow_id]

    def _on_peak(self, peak: Peak | None, at: float, out: list) -> None:
        if peak is None:
            return
        f = self._filters[peak.flow_id].on_peak(peak)
        if f is not None:
            out.append(Emission(at, f))

    def _finish_flow(self, flow_id: int, at: float, out: list) -> None:
        tr = self._trackers.pop(flow_id, None)
        if tr is None:
            return
        emit, retract = self._filters.pop(flow_id).close(tr.close())
        if emit is not None:
            out.append(Emission(at, emit))
        if retract is not None:
            out.append(Emission(at, retract, retract=True))

    def _flush_evicted(self, now: float, out: list) -> None:
        for flow in self.gate.drain_evicted():
            self._finish_flow(flow.flow_id, now, out)

    def next_deadline(self) -> float | None:
        ds = [d for tr in self._trackers.values() if (d := tr.deadline) is not None]
        return min(ds) if ds else None

    def advance(self, now: float) -> list[Emission]:
        out: list[Emission] = []
        self.now = max(self.now, now)
        for tr in self._trackers.values():
            self._on_peak(tr.poll(now), now, out)
        self.gate.sweep(now)
        self._flush_evicted(now, out)
        return out

    def feed(self, pkt: PacketRecord) -> list[Emission]:
        out: list[Emission] = []
        now = pkt.timestamp
        self.now = max(self.now, now)
        events = self.gate.feed(pkt)
        self._flush_evicted(now, out)
        for ev in events:
            tr, _ = self._flow(ev.flow_id)
            self._on_peak(tr.push(ev), now, out)
        return out

    def close(self) -> list[Emission]:
        out: list[Emission] = []
        for flow_id in sorted(self._trackers):
            self._finish_flow(flow_id, self.now, out)
        return out


def stream_features(records: Iterable[PacketRecord],
                    cfg: PipelineConfig = PipelineConfig(),
                    resolution: float = 0.001) -> Iterator[Emission]:
    """Drive a ``StreamingExtractor`` over a time-ordered packet iterator.

    Before each packet the virtual clock is stepped through any pending peak
    deadlines, so a peak is emitted ``resolution`` seconds after its silence
    gap elapses rather than when the next packet happens to arrive.
    """
    ex = StreamingExtractor(cfg)
    for pkt in records:
        while True:
            d = ex.next_deadline()
            if d is None or d + resolution >= pkt.timestamp:
                break
            yield from ex.advance(d + resolution)
        yield from ex.feed(pkt)
    while (d := ex.next_deadline()) is not None:
        yield from ex.advance(d + resolution)
    yield from ex.close()


def apply_retractions(emissions: Iterable[Emission]) -> list[SegmentFeature]:
    """Collapse an emission stream into the final feature list (flow, index order)."""
    live: dict[tuple[int, int], SegmentFeature] = {}
    for e in emissions:
        key = (e.feature.flow_id, e.feature.peak_index)
        if e.retract:
            live.pop(key, None)
        else:
            live[key] = e.feature
    return [live[k] for k in sorted(live)]
