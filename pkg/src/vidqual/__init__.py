"""Per-segment quality classification of encrypted HTTP adaptive video streams.

Packets are grouped into flows, video flows are picked out by the TLS
server name, each flow's retransmission-filtered downstream bytes are cut
into silence-delimited bursts, and each burst's bit count is classified
against per-quality profiles learned from fixed-quality captures.
"""

__version__ = "0.1.0"
