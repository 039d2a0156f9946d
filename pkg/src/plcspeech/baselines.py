"""Reference concealment strategies the engine is measured against."""

from __future__ import annotations

import numpy as np

from . import dsp
from .dsp import FRAME_SIZE
from .vocoder import cross_fade

REPEAT_FADE = 40          # samples blended at the loss/recovery seams
REPEAT_ATT_DB = 3.0       # per repetition of the cycle, from the second on


def _frames(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    pad = (-samples.shape[0]) % FRAME_SIZE
    if pad:
        samples = np.concatenate([samples, np.zeros(pad)])
    return samples.reshape(-1, FRAME_SIZE)


def zero_fill(samples: np.ndarray, frame_lost) -> np.ndarray:
    """Silence during lost frames; the standard worst-case reference."""
    frames = _frames(samples).copy()
    flags = np.asarray(frame_lost, dtype=bool)
    frames[flags[: frames.shape[0]]] = 0.0
    return frames.reshape(-1)[: np.asarray(samples).shape[0]]


def repeat_conceal(samples: np.ndarray, frame_lost) -> np.ndarray:
    """Pitch-cycle repetition with seam blending and a repeat fade.

    On loss onset the last pitch cycle of already-produced output is
    tiled forward, attenuated 3 dB per full repetition starting with the
    second, and blended over 40 samples at both seams.
    """
    frames = _frames(samples)
    flags = np.asarray(frame_lost, dtype=bool)
    n = np.asarray(samples).shape[0]
    out = np.zeros(frames.shape[0] * FRAME_SIZE)
    pos = 0
    in_burst = False
    cycle = None
    cycle_pos = 0
    for i in range(frames.shape[0]):
        if not flags[i]:
            frame = frames[i].copy()
            if in_burst:
                # recovery: walk the repetition a little further and
                # blend it into the true frame
                cont = _continue_cycle(cycle, cycle_pos, REPEAT_FADE)
                frame[:REPEAT_FADE] = cross_fade(cont, frame[:REPEAT_FADE])
                in_burst = False
            out[pos:pos + FRAME_SIZE] = frame
        else:
            if not in_burst:
                in_burst = True
                history = out[max(0, pos - 2 * FRAME_SIZE):pos]
                cycle, cycle_pos = _pick_cycle(history)
            fill, cycle_pos = _continue_cycle_state(cycle, cycle_pos, FRAME_SIZE)
            out[pos:pos + FRAME_SIZE] = fill
        pos += FRAME_SIZE
    return out[:n]


def _pick_cycle(history: np.ndarray):
    """Choose the repetition cycle from recent output."""
    if history.shape[0] < dsp.PITCH_MIN:
        return np.zeros(dsp.PITCH_MIN), 0
    if history.shape[0] >= dsp.WINDOW_SIZE:
        period, corr = dsp.estimate_pitch(history[-dsp.WINDOW_SIZE:])
        period = int(round(period))
    else:
        period, corr = dsp.DEFAULT_PITCH, 0.0
        period = int(period)
    period = int(np.clip(period, dsp.PITCH_MIN, min(dsp.PITCH_MAX, history.shape[0])))
    return history[-period:].copy(), 0


def _continue_cycle_state(cycle: np.ndarray, start: int, count: int):
    """Tile the cycle for count samples, fading 3 dB per repeat from #2."""
    period = cycle.shape[0]
    idx = start + np.arange(count)
    rep = idx // period
    att = 10.0 ** (-REPEAT_ATT_DB * np.maximum(rep, 0) / 20.0)
    # first repetition (rep 0) is unattenuated; attenuation starts with
    # the second pass through the cycle
    vals = cycle[idx % period] * att
    return vals, start + count


def _continue_cycle(cycle: np.ndarray, start: int, count: int) -> np.ndarray:
    vals, _ = _continue_cycle_state(cycle, start, count)
    return vals
