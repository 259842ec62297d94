import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import DOWN_T, UP_T, gap_skipping_new_bytes, interval_new_bytes, tcp
from vidqual.flow import (
    DOWN, UP, ConnectionTable, DpiStatus, FiveTuple, FlowState, PacketRecord, Transport,
    accept_payload, accepted_bytes, expire_flows, match_connection, seq_add, seq_diff,
)


def _flow(cursor=None, d=DOWN):
    f = FlowState(0, DOWN_T)
    f.next_expected_seq[d] = cursor
    return f


class TestSerialArithmetic:
    def test_add_wraps(self):
        assert seq_add(0xFFFFFFFF, 2) == 1

    def test_diff_across_wrap(self):
        assert seq_diff(5, 0xFFFFFFFB) == 10
        assert seq_diff(0xFFFFFFFB, 5) == -10

    @given(st.integers(0, 2**32 - 1), st.integers(-(2**31) + 1, 2**31 - 1))
    def test_diff_inverts_add(self, a, n):
        assert seq_diff(seq_add(a, n), a) == n


class TestMatchConnection:
    def test_first_syn_creates_flow(self):
        table = ConnectionTable()
        syn = tcp(0.0, 100, 0, up=True, flags=("SYN",))
        fid, new = match_connection(syn, table)
        assert new and len(table) == 1
        assert table[fid].dpi_status is DpiStatus.PENDING
        # the SYN sender is the client, so the canonical tuple is the reverse
        assert table[fid].tuple == DOWN_T

    def test_reverse_direction_same_flow(self):
        table = ConnectionTable()
        fid, _ = match_connection(tcp(0.0, 100, 0, up=True, flags=("SYN",)), table)
        fid2, new = match_connection(tcp(0.01, 900, 0, flags=("SYN", "ACK")), table)
        assert fid2 == fid and not new

    def test_distinct_source_ports(self):
        table = ConnectionTable()
        a = FiveTuple(Transport.TCP, "10.0.0.2", "203.0.113.5", 51000, 443)
        b = a._replace(src_port=51001)
        ia, _ = match_connection(PacketRecord(0, a, 1, 0, 0, frozenset({"SYN"})), table)
        ib, _ = match_connection(PacketRecord(0, b, 1, 0, 0, frozenset({"SYN"})), table)
        assert ia != ib

    def test_midstream_orientation_uses_lower_port(self):
        table = ConnectionTable()
        fid, _ = match_connection(tcp(0.0, 1, 10, up=True), table)
        assert table[fid].tuple == DOWN_T

    def test_partition_is_direction_symmetric(self):
        rng = random.Random(7)
        tuples = [FiveTuple(Transport.TCP, f"10.0.0.{i}", "203.0.113.9", 40000 + i, 443)
                  for i in range(6)]
        pkts = []
        for t in range(200):
            tup = rng.choice(tuples)
            if rng.random() < 0.5:
                tup = tup.reversed()
            pkts.append(PacketRecord(t, tup, t, 0, 1))
        flipped = [PacketRecord(p.timestamp, p.tuple.reversed(), p.seq, 0, 1) for p in pkts]

        def partition(ps):
            table = ConnectionTable()
            groups = {}
            for i, p in enumerate(ps):
                groups.setdefault(match_connection(p, table)[0], []).append(i)
            return sorted(groups.values())

        assert partition(pkts) == partition(flipped)


class TestAcceptPayload:
    def test_exact_duplicate(self):
        f = _flow(1100)
        assert accept_payload(f, tcp(1, 1000, 100)) == 0
        assert f.next_expected_seq[DOWN] == 1100

    def test_partial_overlap(self):
        f = _flow(1100)
        assert accept_payload(f, tcp(1, 1000, 200)) == 100
        assert f.next_expected_seq[DOWN] == 1200

    def test_in_order(self):
        f = _flow(1100)
        assert accept_payload(f, tcp(1, 1100, 1460)) == 1460
        assert f.next_expected_seq[DOWN] == 2560

    def test_gap_is_accepted_and_late_fill_ignored(self):
        f = _flow(1000)
        assert accept_payload(f, tcp(1, 2000, 100)) == 100
        assert accept_payload(f, tcp(2, 1000, 1000)) == 0

    def test_wraparound(self):
        f = _flow(2**32 - 50)
        assert accept_payload(f, tcp(1, 2**32 - 50, 100)) == 100
        assert f.next_expected_seq[DOWN] == 50
        assert accept_payload(f, tcp(2, 2**32 - 50, 100)) == 0
        assert accept_payload(f, tcp(3, 0, 80)) == 30

    def test_directions_are_independent(self):
        f = _flow(1100)
        assert accept_payload(f, tcp(1, 1000, 100, up=True)) == 100
        assert f.accepted_by_dir == [0, 100]

    def test_udp_counts_unconditionally(self):
        u = FiveTuple(Transport.UDP, "10.0.0.1", "10.0.0.2", 5353, 53)
        f = FlowState(0, u)
        for _ in range(3):
            assert accept_payload(f, PacketRecord(0, u, None, None, 40)) == 40
        assert f.accepted_bytes_total == 120

    def test_zero_length_updates_activity_only(self):
        f = _flow(1100)
        assert accept_payload(f, tcp(9.5, 1100, 0)) == 0
        assert f.last_activity == 9.5 and f.next_expected_seq[DOWN] == 1100


def _stream(rng: random.Random, n: int, start: int, gaps: bool):
    """Random (absolute seq, len) stream with duplicates, overlaps and old data."""
    hi = start
    sent = []
    out = []
    for _ in range(n):
        r = rng.random()
        ln = rng.choice([0, 1, 100, 536, 1460, 1460, 1460])
        if sent and r < 0.15:
            a, ln = rng.choice(sent)                       # exact duplicate
        elif sent and r < 0.30 and ln > 1:
            a = hi - rng.randint(1, ln - 1)                # straddles the cursor
        elif sent and r < 0.40:
            a = rng.randint(start, max(start, hi - 1))     # old data
        elif gaps and r < 0.50:
            a = hi + rng.randint(1, 3000)                  # jumps ahead
        else:
            a = hi
        out.append((a, ln))
        sent.append((a, ln))
        hi = max(hi, a + ln)
    return out


def _run(stream, start):
    f = _flow()
    return [accept_payload(f, tcp(i, a, n)) for i, (a, n) in enumerate(stream)], f


@pytest.mark.parametrize("start", [1000, 2**32 - 20_000])
def test_matches_interval_oracle_without_gaps(start):
    stream = _stream(random.Random(start), 3000, start, gaps=False)
    got, f = _run(stream, start)
    assert got == interval_new_bytes(stream)
    assert f.accepted_bytes_total <= sum(n for _, n in stream)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 10**6))
def test_matches_gap_skipping_oracle(start, seed):
    stream = _stream(random.Random(seed), 300, start, gaps=True)
    got, _ = _run(stream, start)
    assert got == gap_skipping_new_bytes(stream)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(0, 1500)), max_size=80))
def test_closed_form_cursor_rule(pkts):
    """new bytes = max(0, end - max(cursor, seq)) with the cursor as running max end."""
    f = _flow()
    cursor = None
    for i, (a, n) in enumerate(pkts):
        got = accept_payload(f, tcp(i, a, n))
        if n == 0:
            assert got == 0
            continue
        expect = n if cursor is None else max(0, a + n - max(cursor, a))
        assert got == expect
        cursor = a + n if cursor is None else max(cursor, a + n)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_duplicating_every_packet_preserves_totals(seed):
    rng = random.Random(seed)
    stream = _stream(rng, 200, rng.randrange(2**32), gaps=True)
    pkts = [tcp(i, a, n) for i, (a, n) in enumerate(stream)]
    doubled = [p for p in pkts for _ in (0, 1)]
    assert accepted_bytes(pkts) == accepted_bytes(doubled)


def test_accepted_total_never_decreases():
    f = _flow()
    prev = 0
    for a, n in _stream(random.Random(3), 500, 0, gaps=True):
        accept_payload(f, tcp(0, a, n))
        assert f.accepted_bytes_total >= prev
        prev = f.accepted_bytes_total


class TestExpiry:
    def test_empty_table(self):
        assert expire_flows(ConnectionTable(), 100.0, 30.0) == []

    def test_idle_flow_evicted(self):
        table = ConnectionTable()
        fid, _ = match_connection(tcp(0.0, 1, 0, up=True, flags=("SYN",)), table)
        assert expire_flows(table, 40.0, 30.0) == [fid]
        assert len(table) == 0
        # the tuple is free again, so the next packet opens a new flow
        fid2, new = match_connection(tcp(41.0, 5, 0, up=True, flags=("SYN",)), table)
        assert new and fid2 != fid

    def test_recent_flow_kept(self):
        table = ConnectionTable()
        match_connection(tcp(0.0, 1, 0, up=True, flags=("SYN",)), table)
        assert expire_flows(table, 10.0, 30.0) == []

    def test_bad_timeout(self):
        with pytest.raises(ValueError):
            expire_flows(ConnectionTable(), 1.0, 0.0)


def test_direction_helper():
    f = FlowState(0, DOWN_T)
    assert f.direction(tcp(0, 0, 1)) == DOWN
    assert f.direction(tcp(0, 0, 1, up=True)) == UP
    assert f.server_addr == DOWN_T.src_addr and f.client_addr == DOWN_T.dst_addr
    assert UP_T == DOWN_T.reversed()
