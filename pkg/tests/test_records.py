import io
import json

import pytest

from oracles import DOWN_T, tcp
from vidqual.dpi import build_client_hello
from vidqual.errors import RecordFormatError
from vidqual.flow import FiveTuple, PacketRecord, Transport
from vidqual.records import (
    dumps_record, iter_jsonl, iter_pcap, read_records, record_from_dict, record_to_dict,
    write_jsonl, write_pcap,
)

UDP_T = FiveTuple(Transport.UDP, "10.0.0.2", "10.0.0.53", 5353, 53)


def _sample():
    hello = build_client_hello("r4---sn-x.googlevideo.com", random=bytes(32))
    return [
        tcp(0.0, 10, 0, up=True, flags=("SYN",)),
        tcp(0.015, 900, 0, flags=("SYN", "ACK")),
        tcp(0.03, 11, len(hello), up=True, flags=("ACK", "PSH"), payload=hello),
        tcp(0.5, 901, 1460),
        PacketRecord(0.6, UDP_T, None, None, 33),
    ]


def test_dict_round_trip():
    for rec in _sample():
        assert record_from_dict(record_to_dict(rec)) == rec


def test_jsonl_round_trip():
    buf = io.StringIO()
    assert write_jsonl(_sample(), buf) == 5
    buf.seek(0)
    assert list(iter_jsonl(buf)) == _sample()


def test_blank_lines_skipped():
    line = dumps_record(_sample()[3])
    assert len(list(iter_jsonl(io.StringIO(f"\n{line}\n\n{line}\n")))) == 2


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("ts"),
    lambda d: d.update(len=-1),
    lambda d: d.update(proto="sctp"),
    lambda d: d.update(seq=None),
    lambda d: d.update(payload="zz"),
])
def test_invalid_records(mutate):
    d = record_to_dict(_sample()[3])
    mutate(d)
    with pytest.raises(RecordFormatError):
        record_from_dict(d)


def test_udp_with_seq_rejected():
    d = record_to_dict(_sample()[4])
    d["seq"] = 5
    with pytest.raises(RecordFormatError):
        record_from_dict(d)


def test_bad_json_line():
    with pytest.raises(RecordFormatError, match="line 1"):
        list(iter_jsonl(io.StringIO("{not json\n")))


def test_pcap_round_trip(tmp_path):
    p = tmp_path / "t.pcap"
    with open(p, "wb") as fp:
        write_pcap(_sample(), fp)
    back = read_records(p)
    assert len(back) == 5
    for a, b in zip(back, _sample()):
        assert a.tuple == b.tuple
        assert a.payload_len == b.payload_len
        assert a.timestamp == pytest.approx(b.timestamp, abs=1e-9)
        if b.tuple.transport is Transport.TCP:
            assert (a.seq, a.flags) == (b.seq, b.flags)
    # the ClientHello bytes survive; filler payload is retained as zeros
    assert back[2].payload == _sample()[2].payload
    assert back[3].payload == bytes(1460)


def test_ipv6_pcap(tmp_path):
    t6 = FiveTuple(Transport.TCP, "2001:db8::1", "2001:db8::2", 443, 50000)
    p = tmp_path / "v6.pcap"
    with open(p, "wb") as fp:
        write_pcap([PacketRecord(1.0, t6, 7, 0, 100, frozenset({"ACK"}))], fp)
    (rec,) = read_records(p)
    assert rec.tuple == t6 and rec.payload_len == 100


def test_read_records_jsonl(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("".join(dumps_record(r) + "\n" for r in _sample()))
    assert read_records(p) == _sample()


def test_not_a_capture():
    with pytest.raises(RecordFormatError):
        list(iter_pcap(io.BytesIO(b"garbage bytes here")))


def test_missing_file(tmp_path):
    with pytest.raises(RecordFormatError):
        read_records(tmp_path / "nope.jsonl")


def test_jsonl_is_compact_json():
    obj = json.loads(dumps_record(_sample()[0]))
    assert obj["proto"] == "TCP" and obj["flags"] == ["SYN"]
    assert DOWN_T.reversed().src_port == obj["src_port"]
