"""Packet-loss traces.

A trace is ASCII text, one character per 20 ms packet: '0' received,
'1' lost.  Each packet carries two 10 ms frames, so frame-level loss
flags are the trace repeated twice per character.
"""

from __future__ import annotations

import numpy as np

FRAMES_PER_PACKET = 2


class TraceFormatError(Exception):
    """Trace text contains something other than '0'/'1'."""


def parse_trace(text: str) -> np.ndarray:
    """Trace text to a boolean per-packet array (True = lost)."""
    chars = "".join(text.split())
    if not chars:
        raise TraceFormatError("empty trace")
    bad = set(chars) - {"0", "1"}
    if bad:
        raise TraceFormatError(f"invalid trace characters: {sorted(bad)}")
    return np.frombuffer(chars.encode("ascii"), dtype=np.uint8) == ord("1")


def serialize_trace(packets) -> str:
    return "".join("1" if p else "0" for p in packets)


def frame_flags(packets) -> np.ndarray:
    """Per-packet loss flags to per-frame flags (two frames per packet)."""
    return np.repeat(np.asarray(packets, dtype=bool), FRAMES_PER_PACKET)


def gilbert_elliott(n_packets: int, p_enter: float, p_exit: float,
                    seed: int) -> np.ndarray:
    """Two-state bursty loss channel, starting in the received state.

    Per packet the current state is emitted, then the chain moves:
    received -> lost with probability p_enter, lost -> received with
    probability p_exit.  Long-run loss rate is p_enter/(p_enter+p_exit).
    """
    if not (0.0 <= p_enter <= 1.0 and 0.0 <= p_exit <= 1.0):
        raise ValueError("transition probabilities must be in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random(n_packets)
    out = np.zeros(n_packets, dtype=bool)
    lost = False
    for i in range(n_packets):
        out[i] = lost
        if lost:
            lost = draws[i] >= p_exit
        else:
            lost = draws[i] < p_enter
    return out


def expected_loss_rate(p_enter: float, p_exit: float) -> float:
    """Stationary loss probability of the two-state channel."""
    if p_enter + p_exit == 0.0:
        return 0.0
    return p_enter / (p_enter + p_exit)
