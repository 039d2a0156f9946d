"""Objective measures for concealment quality."""

from __future__ import annotations

import numpy as np

from . import dsp
from .dsp import FRAME_SIZE, WINDOW_SIZE

EPS = 1e-9
# spectral comparisons are floored at roughly the windowed magnitude of
# one 16-bit quantization step — differences below the PCM resolution
# are not representable in the delivered audio
SPECTRAL_FLOOR = 1e-4
LOST_MARGIN = FRAME_SIZE      # lost regions extend 10 ms on each side


def lost_sample_mask(n_samples: int, frame_lost) -> np.ndarray:
    """Boolean sample mask: lost frames widened by 10 ms on both sides."""
    flags = np.asarray(frame_lost, dtype=bool)
    mask = np.zeros(n_samples, dtype=bool)
    for i in np.flatnonzero(flags):
        lo = max(0, i * FRAME_SIZE - LOST_MARGIN)
        hi = min(n_samples, (i + 1) * FRAME_SIZE + LOST_MARGIN)
        mask[lo:hi] = True
    return mask


def snr_lost_regions(reference: np.ndarray, test: np.ndarray, frame_lost) -> float:
    """SNR in dB restricted to lost regions (with margin); inf if none."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    mask = lost_sample_mask(reference.shape[0], frame_lost)
    if not mask.any():
        return float("inf")
    num = float(np.sum(reference[mask] ** 2))
    den = float(np.sum((reference[mask] - test[mask]) ** 2))
    return 10.0 * np.log10(max(num, EPS ** 2) / max(den, EPS ** 2))


def log_spectral_distance(reference: np.ndarray, test: np.ndarray,
                          frame_lost=None) -> float:
    """Mean frame-wise RMS log-magnitude spectral difference in dB.

    Windows are 20 ms with a 10 ms hop.  With frame_lost given, only
    windows overlapping a (margin-widened) lost region count; returns
    0.0 when no window qualifies.
    """
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    n = min(reference.shape[0], test.shape[0])
    mask = (lost_sample_mask(n, frame_lost) if frame_lost is not None
            else np.ones(n, dtype=bool))
    vals = []
    for start in range(0, n - WINDOW_SIZE + 1, FRAME_SIZE):
        if not mask[start:start + WINDOW_SIZE].any():
            continue
        a = np.abs(np.fft.rfft(reference[start:start + WINDOW_SIZE]
                               * dsp.ANALYSIS_WINDOW))
        b = np.abs(np.fft.rfft(test[start:start + WINDOW_SIZE]
                               * dsp.ANALYSIS_WINDOW))
        d = 20.0 * np.log10(np.maximum(a, SPECTRAL_FLOOR)
                            / np.maximum(b, SPECTRAL_FLOOR))
        vals.append(float(np.sqrt(np.mean(d * d))))
    return float(np.mean(vals)) if vals else 0.0


def max_discontinuity(x: np.ndarray) -> float:
    """Largest sample-to-sample jump."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.abs(np.diff(x)).max()) if x.shape[0] > 1 else 0.0


def boundary_discontinuities(x: np.ndarray, frame_lost) -> float:
    """Largest jump at loss onsets and recovery boundaries.

    Checks the two-sample junction at the start of every lost burst and
    at the start of every frame that follows one.
    """
    x = np.asarray(x, dtype=np.float64)
    flags = np.asarray(frame_lost, dtype=bool)
    worst = 0.0
    prev = False
    for i, flag in enumerate(flags):
        edge = (flag and not prev) or (not flag and prev)
        if edge and 0 < i * FRAME_SIZE < x.shape[0]:
            j = i * FRAME_SIZE
            worst = max(worst, abs(x[j] - x[j - 1]))
        prev = flag
    return worst


def segmental_snr(reference: np.ndarray, test: np.ndarray,
                  seg: int = FRAME_SIZE) -> np.ndarray:
    """Per-segment SNR in dB (clipped to +-60); segments of 10 ms."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    n = (min(reference.shape[0], test.shape[0]) // seg) * seg
    r = reference[:n].reshape(-1, seg)
    e = (reference[:n] - test[:n]).reshape(-1, seg)
    num = (r ** 2).mean(axis=1)
    den = np.maximum((e ** 2).mean(axis=1), EPS ** 2)
    return np.clip(10.0 * np.log10(np.maximum(num, EPS ** 2) / den), -60.0, 60.0)
