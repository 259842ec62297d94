"""Playout-buffer estimate from segment completion times.

Model: every completed segment adds a fixed number of media seconds,
playback starts with the first completion and drains the buffer at unit
rate, and the level never goes below zero (a stall).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import LengthMismatch, NonMonotoneTime

DEFAULT_SEGMENT_DURATION_S = 4.0
SESSION_WINDOW_S = 60.0


@dataclass(frozen=True)
class BufferState:
    segment_duration_s: float = DEFAULT_SEGMENT_DURATION_S
    buffered_s: float = 0.0
    playback_started_at: float | None = None
    last_update: float = -math.inf
    segments_completed: int = 0


def _drained(state: BufferState, t: float) -> float:
    if t < state.last_update:
        raise NonMonotoneTime(f"t={t} precedes last update {state.last_update}")
    if state.playback_started_at is None:
        return state.buffered_s
    since = max(state.last_update, state.playback_started_at)
    return max(0.0, state.buffered_s - (t - since))


def on_segment_complete(state: BufferState, t: float) -> BufferState:
    level = _drained(state, t)
    started = state.playback_started_at if state.playback_started_at is not None else t
    return replace(state, buffered_s=level + state.segment_duration_s,
                   playback_started_at=started, last_update=t,
                   segments_completed=state.segments_completed + 1)


def sample_buffer(state: BufferState, t: float) -> float:
    """Projected level at ``t`` without mutating ``state``."""
    return _drained(state, t)


def is_stalled(state: BufferState, t: float) -> bool:
    """True once playback has started and the projected buffer is empty."""
    return state.playback_started_at is not None and _drained(state, t) <= 0.0


def levels_at_completions(completions: Sequence[float],
                          segment_duration_s: float = DEFAULT_SEGMENT_DURATION_S) -> list[float]:
    """Buffer level right after each completion."""
    st = BufferState(segment_duration_s)
    out = []
    for t in completions:
        st = on_segment_complete(st, t)
        out.append(st.buffered_s)
    return out


def buffer_series(completions: Sequence[float],
                  segment_duration_s: float = DEFAULT_SEGMENT_DURATION_S,
                  step_s: float = 1.0) -> list[dict]:
    """Rows of (t, buffered_s, segments_completed, stall_flag).

    One row per completion plus rows every ``step_s`` seconds in between;
    after the last completion the series runs until the buffer has drained.
    """
    if step_s <= 0:
        raise ValueError("step_s must be positive")
    comps = sorted(completions)
    rows = []
    st = BufferState(segment_duration_s)
    for i, tc in enumerate(comps):
        st = on_segment_complete(st, tc)
        rows.append(_row(st, tc))
        nxt = comps[i + 1] if i + 1 < len(comps) else tc + st.buffered_s + step_s
        k = 1
        while tc + k * step_s < nxt:
            rows.append(_row(st, tc + k * step_s))
            k += 1
    return rows


def _row(st: BufferState, t: float) -> dict:
    return {"t": t, "buffered_s": sample_buffer(st, t),
            "segments_completed": st.segments_completed,
            "stall_flag": int(is_stalled(st, t))}


@dataclass(frozen=True)
class DriftReport:
    mean_abs_drift_s: float
    std_s: float
    per_feature_mean_s: float
    per_feature_std_s: float
    n: int

    def to_dict(self) -> dict:
        return {"mean_abs_drift_s": self.mean_abs_drift_s, "std_s": self.std_s,
                "per_feature_mean_s": self.per_feature_mean_s,
                "per_feature_std_s": self.per_feature_std_s, "n": self.n}


def drift_report(estimates: Sequence[float], truth: Sequence[float]) -> DriftReport:
    """Compare estimated and true buffer levels sampled at the same completions.

    ``mean_abs_drift_s``/``std_s`` describe the signed error (its bias and
    spread); the per-feature figures describe the absolute error.
    """
    if len(estimates) != len(truth):
        raise LengthMismatch(f"{len(estimates)} estimates vs {len(truth)} truth samples")
    if not estimates:
        return DriftReport(0.0, 0.0, 0.0, 0.0, 0)
    err = np.asarray(estimates, dtype=float) - np.asarray(truth, dtype=float)
    a = np.abs(err)
    return DriftReport(float(abs(err.mean())), float(err.std()),
                       float(a.mean()), float(a.std()), int(err.size))


@dataclass
class Session:
    client: str
    sni: str | None
    flow_ids: list
    first_seen: float
    last_seen: float


def group_sessions(flows: Iterable, window_s: float = SESSION_WINDOW_S) -> list[Session]:
    """Group video flows into download sessions by (client, SNI).

    ``flows`` items need ``flow_id``, ``client``, ``sni``, ``start`` and
    ``end``.  A flow starting more than ``window_s`` after the session's
    last activity opens a new session.
    """
    sessions: list[Session] = []
    open_: dict[tuple, Session] = {}
    for f in sorted(flows, key=lambda f: (f.start, f.flow_id)):
        key = (f.client, f.sni)
        s = open_.get(key)
        if s is None or f.start - s.last_seen > window_s:
            s = Session(f.client, f.sni, [], f.start, f.end)
            sessions.append(s)
            open_[key] = s
        s.flow_ids.append(f.flow_id)
        s.last_seen = max(s.last_seen, f.end)
    return sessions
