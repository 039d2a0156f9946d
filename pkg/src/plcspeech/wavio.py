"""Mono 16-bit PCM WAV reading and writing.

Conversion is the exact power-of-two mapping (int / 32768.0 on read,
round-and-clip on write) so that int -> float -> int round-trips
bit-exactly; the transparency guarantees of the non-causal mode rely
on that.
"""

from __future__ import annotations

import wave

import numpy as np

from .dsp import SAMPLE_RATE
from .predictor import FormatError

PCM_SCALE = 32768.0


def float_to_pcm16(x: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(x, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def pcm16_to_float(pcm: np.ndarray) -> np.ndarray:
    return np.asarray(pcm, dtype=np.float64) / PCM_SCALE


def read_wav(path) -> np.ndarray:
    """Read a mono 16 kHz 16-bit WAV as float64 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise FormatError(f"compressed WAV not supported: {path}")
            if fh.getsampwidth() != 2:
                raise FormatError(f"{path}: need 16-bit PCM, got "
                                  f"{8 * fh.getsampwidth()}-bit")
            if fh.getnchannels() != 1:
                raise FormatError(f"{path}: need mono, got {fh.getnchannels()} channels")
            if fh.getframerate() != SAMPLE_RATE:
                raise FormatError(f"{path}: need {SAMPLE_RATE} Hz, got "
                                  f"{fh.getframerate()}")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FormatError(f"unreadable WAV {path}: {exc}") from exc
    return pcm16_to_float(np.frombuffer(raw, dtype="<i2"))


def write_wav(path, samples: np.ndarray) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(float_to_pcm16(samples).tobytes())
