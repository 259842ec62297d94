"""Packet record I/O: normalized JSONL and Ethernet pcap/pcapng."""

from __future__ import annotations

import ipaddress
import json
import socket
import struct
from pathlib import Path
from typing import IO, Iterable, Iterator

import dpkt

from .errors import RecordFormatError
from .flow import TCP_FLAGS, FiveTuple, PacketRecord, Transport

# how much leading TCP payload per direction is kept for DPI
PAYLOAD_RETAIN_BYTES = 4096

_PCAP_MAGICS = {b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\xc3\xd4", b"\x4d\x3c\xb2\xa1",
                b"\xa1\xb2\x3c\x4d"}
_PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"

_FLAG_BITS = {
    "FIN": dpkt.tcp.TH_FIN,
    "SYN": dpkt.tcp.TH_SYN,
    "RST": dpkt.tcp.TH_RST,
    "PSH": dpkt.tcp.TH_PUSH,
    "ACK": dpkt.tcp.TH_ACK,
}


def record_to_dict(rec: PacketRecord) -> dict:
    t = rec.tuple
    d = {
        "ts": rec.timestamp,
        "proto": t.transport.value,
        "src_ip": t.src_addr,
        "src_port": t.src_port,
        "dst_ip": t.dst_addr,
        "dst_port": t.dst_port,
        "seq": rec.seq,
        "ack": rec.ack,
        "len": rec.payload_len,
        "flags": [f for f in TCP_FLAGS if f in rec.flags],
    }
    if rec.payload is not None:
        d["payload"] = rec.payload.hex()
    return d


def record_from_dict(d: dict) -> PacketRecord:
    try:
        proto = Transport(d["proto"])
        tup = FiveTuple(proto, str(d["src_ip"]), str(d["dst_ip"]),
                        int(d["src_port"]), int(d["dst_port"]))
        seq = d.get("seq")
        ack = d.get("ack")
        payload = d.get("payload")
        rec = PacketRecord(
            timestamp=float(d["ts"]),
            tuple=tup,
            seq=None if seq is None else int(seq),
            ack=None if ack is None else int(ack),
            payload_len=int(d["len"]),
            flags=frozenset(d.get("flags") or ()),
            payload=None if payload is None else bytes.fromhex(payload),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordFormatError(f"bad packet record {d!r}: {exc}") from exc
    if rec.payload_len < 0:
        raise RecordFormatError(f"negative payload length in {d!r}")
    if (rec.seq is None) != (proto is Transport.UDP):
        raise RecordFormatError(f"seq must be present iff TCP: {d!r}")
    return rec


def dumps_record(rec: PacketRecord) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"))


def write_jsonl(records: Iterable[PacketRecord], fp: IO[str]) -> int:
    n = 0
    for rec in records:
        fp.write(dumps_record(rec))
        fp.write("\n")
        n += 1
    return n


def iter_jsonl(fp: IO[str]) -> Iterator[PacketRecord]:
    """Lazily decode a JSONL stream; suitable for piped, real-time input."""
    for lineno, line in enumerate(fp, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"line {lineno}: {exc}") from exc
        yield record_from_dict(obj)


def _flags_from_bits(bits: int) -> frozenset:
    return frozenset(name for name, bit in _FLAG_BITS.items() if bits & bit)


def _decode_ip(buf: bytes, ts: float, retained: dict) -> PacketRecord | None:
    eth = dpkt.ethernet.Ethernet(buf)
    ip = eth.data
    if isinstance(ip, dpkt.ip.IP):
        src, dst = socket.inet_ntop(socket.AF_INET, ip.src), socket.inet_ntop(socket.AF_INET, ip.dst)
    elif isinstance(ip, dpkt.ip6.IP6):
        src, dst = socket.inet_ntop(socket.AF_INET6, ip.src), socket.inet_ntop(socket.AF_INET6, ip.dst)
    else:
        return None
    l4 = ip.data
    if isinstance(l4, dpkt.tcp.TCP):
        tup = FiveTuple(Transport.TCP, src, dst, l4.sport, l4.dport)
        data = bytes(l4.data)
        payload = None
        if data:
            kept = retained.get(tup, 0)
            if kept < PAYLOAD_RETAIN_BYTES:
                payload = data
                retained[tup] = kept + len(data)
        return PacketRecord(ts, tup, l4.seq, l4.ack, len(data),
                            _flags_from_bits(l4.flags), payload)
    if isinstance(l4, dpkt.udp.UDP):
        tup = FiveTuple(Transport.UDP, src, dst, l4.sport, l4.dport)
        return PacketRecord(ts, tup, None, None, len(l4.data))
    return None


def iter_pcap(fp: IO[bytes]) -> Iterator[PacketRecord]:
    head = fp.read(4)
    fp.seek(0)
    try:
        if head == _PCAPNG_MAGIC:
            reader = dpkt.pcapng.Reader(fp)
        elif head in _PCAP_MAGICS:
            reader = dpkt.pcap.Reader(fp)
        else:
            raise RecordFormatError("not a pcap/pcapng file")
        if reader.datalink() != dpkt.pcap.DLT_EN10MB:
            raise RecordFormatError(f"unsupported link type {reader.datalink()}")
    except (ValueError, struct.error, dpkt.dpkt.UnpackError) as exc:
        raise RecordFormatError(f"cannot read capture: {exc}") from exc
    retained: dict = {}
    for ts, buf in reader:
        try:
            rec = _decode_ip(buf, float(ts), retained)
        except (dpkt.dpkt.UnpackError, struct.error, IndexError):
            continue  # truncated or non-IP frame
        if rec is not None:
            yield rec


def _encode_frame(rec: PacketRecord) -> bytes:
    t = rec.tuple
    body = rec.payload if rec.payload is not None else bytes(rec.payload_len)
    if t.transport is Transport.TCP:
        bits = 0
        for name, bit in _FLAG_BITS.items():
            if name in rec.flags:
                bits |= bit
        l4 = dpkt.tcp.TCP(sport=t.src_port, dport=t.dst_port, seq=rec.seq or 0,
                          ack=rec.ack or 0, flags=bits, data=body)
        proto = dpkt.ip.IP_PROTO_TCP
    else:
        l4 = dpkt.udp.UDP(sport=t.src_port, dport=t.dst_port, data=body)
        l4.ulen = len(l4)
        proto = dpkt.ip.IP_PROTO_UDP
    addr = ipaddress.ip_address(t.src_addr)
    if addr.version == 4:
        ip = dpkt.ip.IP(src=addr.packed, dst=ipaddress.ip_address(t.dst_addr).packed,
                        p=proto, data=l4)
        ip.len = len(ip)
        eth_type = dpkt.ethernet.ETH_TYPE_IP
    else:
        ip = dpkt.ip6.IP6(src=addr.packed, dst=ipaddress.ip_address(t.dst_addr).packed,
                          nxt=proto, hlim=64, data=l4)
        ip.plen = len(l4)
        eth_type = dpkt.ethernet.ETH_TYPE_IP6
    eth = dpkt.ethernet.Ethernet(src=b"\x02\x00\x00\x00\x00\x01",
                                 dst=b"\x02\x00\x00\x00\x00\x02",
                                 type=eth_type, data=ip)
    return bytes(eth)


def write_pcap(records: Iterable[PacketRecord], fp: IO[bytes]) -> int:
    """Emit records as an Ethernet pcap.  Payload not retained is zero filler."""
    writer = dpkt.pcap.Writer(fp, nano=True)
    n = 0
    for rec in records:
        writer.writepkt(_encode_frame(rec), ts=rec.timestamp)
        n += 1
    return n


def is_pcap(path: str | Path) -> bool:
    with open(path, "rb") as fp:
        head = fp.read(4)
    return head in _PCAP_MAGICS or head == _PCAPNG_MAGIC


def read_records(path: str | Path) -> list[PacketRecord]:
    """Load a whole capture, picking the decoder from the file's magic bytes."""
    path = Path(path)
    try:
        if is_pcap(path):
            with open(path, "rb") as fp:
                return list(iter_pcap(fp))
        with open(path, encoding="utf-8") as fp:
            return list(iter_jsonl(fp))
    except OSError as exc:
        raise RecordFormatError(f"{path}: {exc}") from exc
