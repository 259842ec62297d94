"""TLS ClientHello inspection: Server Name Indication extraction and video gating."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import MalformedHello, TruncatedHello

CONTENT_HANDSHAKE = 0x16
HANDSHAKE_CLIENT_HELLO = 0x01
EXT_SERVER_NAME = 0x0000
NAME_TYPE_HOST = 0
MAX_RECORD_LEN = 1 << 14

# The literal domain plus the spelling live servers actually use.
DEFAULT_MATCH_DOMAINS = ("googlevideos.com", "googlevideo.com")


@dataclass(frozen=True, slots=True)
class SniResult:
    hostname: str | None
    bytes_consumed: int


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: bytes, pos: int = 0, end: int | None = None):
        self.buf = buf
        self.pos = pos
        self.end = len(buf) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise MalformedHello(f"field of {n} bytes overruns structure at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u24(self) -> int:
        return int.from_bytes(self.take(3), "big")

    def sub(self, n: int) -> _Reader:
        start = self.pos
        self.take(n)
        return _Reader(self.buf, start, start + n)


def _record_version_ok(major: int, minor: int) -> bool:
    return major == 3 and 1 <= minor <= 3


def _collect_handshake(data: bytes) -> tuple[bytes, int] | None:
    """Reassemble one handshake message from consecutive TLS records.

    Returns (message, bytes consumed), or None if the payload is not a TLS
    handshake carrying a ClientHello.
    """
    if not data:
        raise TruncatedHello("empty payload")
    if data[0] != CONTENT_HANDSHAKE:
        return None
    msg = bytearray()
    pos = 0
    need = None
    while need is None or len(msg) < need:
        if pos + 5 > len(data):
            raise TruncatedHello(f"record header cut at offset {pos}")
        ctype, major, minor, rec_len = struct.unpack_from("!BBBH", data, pos)
        if pos == 0 and not _record_version_ok(major, minor):
            return None
        if ctype != CONTENT_HANDSHAKE:
            raise MalformedHello(f"record type {ctype:#x} interrupts handshake")
        if not _record_version_ok(major, minor):
            raise MalformedHello(f"record version {major}.{minor} changes mid-handshake")
        if rec_len == 0 or rec_len > MAX_RECORD_LEN:
            raise MalformedHello(f"bad record length {rec_len}")
        if pos + 5 + rec_len > len(data):
            raise TruncatedHello("record body cut short")
        msg += data[pos + 5:pos + 5 + rec_len]
        pos += 5 + rec_len
        if need is None and len(msg) >= 4:
            if msg[0] != HANDSHAKE_CLIENT_HELLO:
                return None
            need = 4 + int.from_bytes(msg[1:4], "big")
    return bytes(msg[:need]), pos


def _decode_hostname(raw: bytes) -> str:
    if not raw or b"\x00" in raw:
        raise MalformedHello("empty or NUL-bearing server name")
    try:
        return raw.decode("ascii").lower()
    except UnicodeDecodeError as exc:
        raise MalformedHello("non-ASCII server name") from exc


def _parse_client_hello(body: _Reader) -> str | None:
    body.take(2 + 32)                # client_version, random
    body.take(body.u8())             # session_id
    n_suites = body.u16()
    if n_suites == 0 or n_suites % 2:
        raise MalformedHello(f"cipher_suites length {n_suites}")
    body.take(n_suites)
    n_comp = body.u8()
    if n_comp == 0:
        raise MalformedHello("no compression methods")
    body.take(n_comp)
    if body.remaining() == 0:
        return None                  # pre-extension ClientHello
    ext_total = body.u16()
    if ext_total != body.remaining():
        raise MalformedHello(f"extensions length {ext_total} != {body.remaining()} remaining")
    exts = body.sub(ext_total)
    hostname = None
    seen = set()
    while exts.remaining():
        etype = exts.u16()
        ext = exts.sub(exts.u16())
        if etype in seen:
            raise MalformedHello(f"duplicate extension {etype:#06x}")
        seen.add(etype)
        if etype != EXT_SERVER_NAME or ext.remaining() == 0:
            continue
        names = ext.sub(ext.u16())
        if ext.remaining():
            raise MalformedHello("trailing bytes in server_name extension")
        while names.remaining():
            name_type = names.u8()
            raw = names.take(names.u16())
            if name_type == NAME_TYPE_HOST and hostname is None:
                hostname = _decode_hostname(raw)
    return hostname


def extract_sni(tcp_payload: bytes) -> SniResult:
    """Return the host_name from a ClientHello at the start of ``tcp_payload``.

    ``hostname`` is None when the payload is not a TLS ClientHello or carries
    no server_name extension.  Raises ``TruncatedHello`` if the payload ends
    before the message does and ``MalformedHello`` for inconsistent lengths.
    """
    got = _collect_handshake(bytes(tcp_payload))
    if got is None:
        return SniResult(None, 0)
    msg, consumed = got
    hostname = _parse_client_hello(_Reader(msg, 4))
    return SniResult(hostname, consumed)


def is_youtube_video(hostname: str | None,
                     match_domains: Iterable[str] = DEFAULT_MATCH_DOMAINS,
                     anchored: bool = False) -> bool:
    """Substring match against the configured domains (case-insensitive).

    With ``anchored`` a domain must equal the hostname or be a dot-separated
    suffix of it.
    """
    if not hostname:
        return False
    host = hostname.lower().rstrip(".")
    for dom in match_domains:
        dom = dom.lower()
        if anchored:
            if host == dom or host.endswith("." + dom):
                return True
        elif dom in host:
            return True
    return False


def _ext(etype: int, body: bytes) -> bytes:
    return struct.pack("!HH", etype, len(body)) + body


def server_name_extension(hostname: str | bytes) -> bytes:
    raw = hostname.encode("ascii") if isinstance(hostname, str) else hostname
    entry = struct.pack("!BH", NAME_TYPE_HOST, len(raw)) + raw
    return _ext(EXT_SERVER_NAME, struct.pack("!H", len(entry)) + entry)


def build_client_hello(hostname: str | bytes | None,
                       *,
                       extra_extensions: Sequence[tuple[int, bytes]] = (
                           (0x000a, b"\x00\x04\x00\x1d\x00\x17"),   # supported_groups
                           (0x000d, b"\x00\x04\x04\x03\x08\x04"),   # signature_algorithms
                       ),
                       cipher_suites: Sequence[int] = (0xc02f, 0xc030, 0x009c, 0x002f),
                       session_id: bytes = b"",
                       random: bytes | None = None,
                       record_version: int = 0x0301,
                       client_version: int = 0x0303,
                       split_at: Sequence[int] = ()) -> bytes:
    """Encode a TLS ClientHello, optionally fragmented across several records.

    ``split_at`` lists offsets into the handshake message at which a new
    record starts.  ``hostname=None`` omits the server_name extension.
    """
    if random is None:
        random = os.urandom(32)
    suites = b"".join(struct.pack("!H", s) for s in cipher_suites)
    exts = b""
    if hostname is not None:
        exts += server_name_extension(hostname)
    exts += b"".join(_ext(t, b) for t, b in extra_extensions)
    body = (struct.pack("!H", client_version) + random
            + struct.pack("!B", len(session_id)) + session_id
            + struct.pack("!H", len(suites)) + suites
            + b"\x01\x00"
            + struct.pack("!H", len(exts)) + exts)
    msg = struct.pack("!B", HANDSHAKE_CLIENT_HELLO) + len(body).to_bytes(3, "big") + body
    cuts = [0, *sorted({c for c in split_at if 0 < c < len(msg)}), len(msg)]
    out = bytearray()
    for a, b in zip(cuts, cuts[1:]):
        out += struct.pack("!BHH", CONTENT_HANDSHAKE, record_version, b - a) + msg[a:b]
    return bytes(out)
