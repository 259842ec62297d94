"""Connection table and retransmission-filtered byte accounting.

Each flow keeps one sequence cursor per direction.  Payload bytes are
accepted only if they lie beyond the cursor, so a byte is never counted
twice no matter how often the sender retransmits it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

SEQ_MOD = 1 << 32
_SEQ_MASK = SEQ_MOD - 1
_HALF = 1 << 31

TCP_FLAGS = ("SYN", "FIN", "RST", "ACK", "PSH")


def seq_add(a: int, n: int) -> int:
    return (a + n) & _SEQ_MASK


def seq_diff(a: int, b: int) -> int:
    """Signed serial-number distance ``a - b`` on the 32-bit sequence circle."""
    d = (a - b) & _SEQ_MASK
    return d - SEQ_MOD if d >= _HALF else d


class Transport(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


class FiveTuple(NamedTuple):
    """Directional five-tuple; a plain tuple so hashing and equality stay in C."""

    transport: Transport
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int

    def reversed(self) -> FiveTuple:
        return FiveTuple(self.transport, self.dst_addr, self.src_addr,
                         self.dst_port, self.src_port)

    def __str__(self) -> str:
        return (f"{self.transport.value} {self.src_addr}:{self.src_port}"
                f" -> {self.dst_addr}:{self.dst_port}")


@dataclass(slots=True)
class PacketRecord:
    """One captured packet, reduced to what the pipeline needs.

    ``payload`` is only retained for the first few KiB of a connection so the
    TLS ClientHello can be inspected; everything else is carried as a length.
    """

    timestamp: float
    tuple: FiveTuple
    seq: int | None
    ack: int | None
    payload_len: int
    flags: frozenset = frozenset()
    payload: bytes | None = None


class DpiStatus(enum.Enum):
    PENDING = "Pending"
    VIDEO = "Video"
    NON_VIDEO = "NonVideo"


DOWN = 0  # server -> client
UP = 1    # client -> server


@dataclass(slots=True)
class FlowState:
    flow_id: int
    tuple: FiveTuple  # canonical direction: server -> client
    next_expected_seq: list = field(default_factory=lambda: [None, None])
    accepted_by_dir: list = field(default_factory=lambda: [0, 0])
    last_activity: float = 0.0
    first_seen: float = 0.0
    dpi_status: DpiStatus = DpiStatus.PENDING
    sni: str | None = None
    hello_buf: bytearray = field(default_factory=bytearray)

    @property
    def accepted_bytes_total(self) -> int:
        return self.accepted_by_dir[DOWN] + self.accepted_by_dir[UP]

    @property
    def client_addr(self) -> str:
        return self.tuple.dst_addr

    @property
    def server_addr(self) -> str:
        return self.tuple.src_addr

    def direction(self, pkt: PacketRecord) -> int:
        return DOWN if pkt.tuple == self.tuple else UP


def _canonical_tuple(pkt: PacketRecord) -> FiveTuple:
    """Orient a new flow server -> client.

    The sender of a bare SYN is the client and the sender of a SYN/ACK the
    server.  A flow first seen mid-stream falls back to the lower port being
    the server's (well-known service ports), destination on a tie.
    """
    t = pkt.tuple
    flags = pkt.flags
    if "SYN" in flags:
        return t if "ACK" in flags else t.reversed()
    if t.src_port < t.dst_port:
        return t
    return t.reversed()


class ConnectionTable:
    """Five-tuple keyed flow table; both directions map to one flow."""

    def __init__(self) -> None:
        self.flows: dict[int, FlowState] = {}
        self._by_tuple: dict[FiveTuple, FlowState] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.flows)

    def __contains__(self, flow_id: int) -> bool:
        return flow_id in self.flows

    def __getitem__(self, flow_id: int) -> FlowState:
        return self.flows[flow_id]

    def lookup(self, tup: FiveTuple) -> FlowState | None:
        return self._by_tuple.get(tup)

    def match(self, pkt: PacketRecord) -> tuple[FlowState, bool]:
        flow = self._by_tuple.get(pkt.tuple)
        if flow is not None:
            return flow, False
        canon = _canonical_tuple(pkt)
        flow = FlowState(flow_id=self._next_id, tuple=canon,
                         last_activity=pkt.timestamp, first_seen=pkt.timestamp)
        self._next_id += 1
        self.flows[flow.flow_id] = flow
        self._by_tuple[canon] = flow
        self._by_tuple[canon.reversed()] = flow
        return flow, True

    def expire(self, now: float, idle_timeout: float) -> list[FlowState]:
        if idle_timeout <= 0:
            raise ValueError("idle_timeout must be positive")
        gone = [f for f in self.flows.values() if now - f.last_activity > idle_timeout]
        for f in gone:
            self.remove(f.flow_id)
        return gone

    def remove(self, flow_id: int) -> FlowState:
        flow = self.flows.pop(flow_id)
        self._by_tuple.pop(flow.tuple, None)
        self._by_tuple.pop(flow.tuple.reversed(), None)
        return flow


def match_connection(pkt: PacketRecord, table: ConnectionTable) -> tuple[int, bool]:
    flow, is_new = table.match(pkt)
    return flow.flow_id, is_new


def accept_payload(flow: FlowState, pkt: PacketRecord) -> int:
    """Count the bytes of ``pkt`` not previously accepted in its direction.

    Data entirely behind the cursor is a retransmission and yields 0; data
    straddling it yields the fresh suffix.  Data at or beyond the cursor is
    accepted whole and moves the cursor to its end, so bytes of a skipped
    gap that show up later are treated as retransmissions.
    """
    flow.last_activity = max(flow.last_activity, pkt.timestamp)
    n = pkt.payload_len
    d = flow.direction(pkt)
    if n <= 0:
        return 0
    if pkt.seq is None:
        flow.accepted_by_dir[d] += n
        return n
    end = seq_add(pkt.seq, n)
    cursor = flow.next_expected_seq[d]
    if cursor is None or seq_diff(pkt.seq, cursor) >= 0:
        new = n
    elif seq_diff(end, cursor) <= 0:
        return 0
    else:
        new = seq_diff(end, cursor)
    flow.next_expected_seq[d] = end
    flow.accepted_by_dir[d] += new
    return new


def expire_flows(table: ConnectionTable, now: float, idle_timeout: float) -> list[int]:
    return [f.flow_id for f in table.expire(now, idle_timeout)]


def accepted_bytes(records: Iterable[PacketRecord]) -> dict[int, int]:
    """Replay ``records`` through a fresh table; accepted bytes per flow id."""
    table = ConnectionTable()
    totals: dict[int, int] = {}
    for pkt in records:
        flow, _ = table.match(pkt)
        totals[flow.flow_id] = totals.get(flow.flow_id, 0) + accept_payload(flow, pkt)
    return totals
