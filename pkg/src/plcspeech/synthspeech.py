"""Deterministic synthetic speech for training and evaluation.

No speech corpus ships with the package, so utterances are built from
the classic source-filter recipe: voiced segments are glottal pulse
trains with gliding f0 through slowly morphing formant resonators,
unvoiced segments are shaped noise, separated by short silences.  The
result is not natural speech, but it exercises every code path a real
recording would (pitch continuity, voicing decisions, spectral
envelopes, transients, silence floors) and is fully reproducible from
a seed.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE

# formant targets (Hz) loosely covering the vowel space
VOWELS = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (300, 870, 2240),
    (530, 1840, 2480),
    (660, 1720, 2410),
    (440, 1020, 2240),
)
BANDWIDTHS = (90.0, 110.0, 160.0)


def _resonator(f_hz: np.ndarray, bw_hz: float, x: np.ndarray) -> np.ndarray:
    """Time-varying two-pole resonator (coefficients per sample)."""
    r = np.exp(-np.pi * bw_hz / SAMPLE_RATE)
    theta = 2.0 * np.pi * f_hz / SAMPLE_RATE
    a1 = 2.0 * r * np.cos(theta)
    a2 = -r * r
    y = np.empty_like(x)
    y1 = y2 = 0.0
    for n in range(x.shape[0]):
        y0 = x[n] + a1[n] * y1 + a2 * y2
        y[n] = y0
        y2, y1 = y1, y0
    return y


def _glottal_pulses(f0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sawtooth-flavoured pulse train following a per-sample f0 track."""
    n = f0.shape[0]
    phase = np.cumsum(f0 / SAMPLE_RATE)
    exc = np.zeros(n)
    marks = np.flatnonzero(np.diff(np.floor(phase)) > 0)
    exc[marks] = 1.0
    # a touch of aspiration noise keeps voiced frames from being sterile
    exc += 0.03 * rng.standard_normal(n)
    return exc


def _voiced(duration: int, rng: np.random.Generator) -> np.ndarray:
    f0_a = rng.uniform(95.0, 260.0)
    f0_b = np.clip(f0_a * rng.uniform(0.8, 1.25), 90.0, 280.0)
    f0 = np.linspace(f0_a, f0_b, duration)
    va = np.array(VOWELS[rng.integers(0, len(VOWELS))], dtype=np.float64)
    vb = np.array(VOWELS[rng.integers(0, len(VOWELS))], dtype=np.float64)
    y = _glottal_pulses(f0, rng)
    mix = np.linspace(0.0, 1.0, duration)
    for i, bw in enumerate(BANDWIDTHS):
        track = va[i] + (vb[i] - va[i]) * mix
        y = _resonator(track, bw, y)
    peak = np.abs(y).max()
    return y / peak if peak > 0 else y


def _unvoiced(duration: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(duration)
    centre = rng.uniform(2500.0, 6000.0)
    y = _resonator(np.full(duration, centre), 800.0, np.diff(noise, prepend=0.0))
    peak = np.abs(y).max()
    return 0.35 * y / peak if peak > 0 else y


def _envelope(duration: int, rng: np.random.Generator) -> np.ndarray:
    attack = int(rng.uniform(0.01, 0.04) * SAMPLE_RATE)
    release = int(rng.uniform(0.02, 0.06) * SAMPLE_RATE)
    attack = min(attack, duration // 2)
    release = min(release, duration - attack)
    env = np.ones(duration)
    if attack:
        env[:attack] = 0.5 - 0.5 * np.cos(np.pi * np.arange(attack) / attack)
    if release:
        env[-release:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(release) / release)
    return env


def generate_utterance(seed: int, seconds: float = 3.0) -> np.ndarray:
    """One synthetic utterance, peak-normalized to 0.5."""
    rng = np.random.default_rng(seed)
    total = int(seconds * SAMPLE_RATE)
    parts = []
    n = 0
    while n < total:
        kind = rng.random()
        if kind < 0.55:
            dur = int(rng.uniform(0.15, 0.40) * SAMPLE_RATE)
            seg = _voiced(dur, rng) * rng.uniform(0.5, 1.0)
        elif kind < 0.80:
            dur = int(rng.uniform(0.06, 0.20) * SAMPLE_RATE)
            seg = _unvoiced(dur, rng) * rng.uniform(0.4, 1.0)
        else:
            dur = int(rng.uniform(0.05, 0.15) * SAMPLE_RATE)
            seg = np.zeros(dur)
        if seg.shape[0] and seg.any():
            seg = seg * _envelope(seg.shape[0], rng)
        parts.append(seg)
        n += dur
    audio = np.concatenate(parts)[:total]
    if audio.shape[0] < total:
        audio = np.concatenate([audio, np.zeros(total - audio.shape[0])])
    peak = np.abs(audio).max()
    return 0.5 * audio / peak if peak > 0 else audio


def generate_corpus(count: int, base_seed: int = 1000,
                    seconds: float = 3.0) -> list:
    return [generate_utterance(base_seed + i, seconds) for i in range(count)]
