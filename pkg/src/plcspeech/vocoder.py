"""Deterministic conditioned-LPC synthesis.

Concealed audio is produced by an all-pole filter driven by a mixed
excitation: fractional-phase pitch pulses (power share corr^2) plus
white noise (power share 1 - corr^2).  Each 80-sample chunk builds on a
deterministic base — the filter's zero-input response, which keeps the
waveform continuous with whatever came before, plus a voicing-weighted
copy of the previous pitch cycle, which sustains the waveform between
pulses the way vocal-tract resonances do — and the excitation gain is
solved in closed form so the chunk's energy tracks the energy the
feature vector implies.

Teacher forcing overwrites the filter memory and output history with
true samples and recovers their excitation by inverse filtering; the
pulse train is then re-anchored to the strongest excitation peak in the
most recent pitch cycle, so synthesis after known audio continues the
true cycle in phase instead of guessing one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter, lfiltic

from . import dsp
from .burg import burg_fit
from .dsp import FeatureVector

CHUNK = 80
SOFT_CLIP_KNEE = 0.95
# weight taking each chunk's deterministic base from the filter ringing
# (exact at the chunk seam) over to the previous pitch cycle: a short
# raised-cosine rise — the ringing only stays a faithful continuation
# for a millisecond or two — then full handover
_LTP_RISE = 24
_LTP_RAMP = np.concatenate([
    0.5 * (1.0 - np.cos(np.pi * (np.arange(_LTP_RISE) + 0.5) / _LTP_RISE)),
    np.ones(80 - _LTP_RISE)])
# excitation history long enough to hold one full cycle of the longest
# admissible pitch period
EXC_MEMORY = dsp.PITCH_MAX
# conditioned energies at or below this are digital silence (the band
# floor itself implies ~1.3e-9); rendering them as noise would turn
# silent gaps into a faint hiss
SILENCE_POWER = 1e-8


@dataclass
class VocoderState:
    """Everything the synthesizer carries between chunks."""

    rng: np.random.Generator
    lpc_memory: np.ndarray = field(default_factory=lambda: np.zeros(dsp.LPC_ORDER))
    excitation_memory: np.ndarray = field(
        default_factory=lambda: np.zeros(EXC_MEMORY))
    out_history: np.ndarray = field(default_factory=lambda: np.zeros(EXC_MEMORY))
    pulse_phase: float = 0.0
    last_period: float = dsp.DEFAULT_PITCH
    last_lpc: np.ndarray = field(default_factory=lambda: np.zeros(dsp.LPC_ORDER))

    def copy(self) -> "VocoderState":
        # independent RNG stream so exploratory synthesis can't perturb
        # the main one
        return VocoderState(rng=np.random.default_rng(self.rng.integers(2 ** 63)),
                            lpc_memory=self.lpc_memory.copy(),
                            excitation_memory=self.excitation_memory.copy(),
                            out_history=self.out_history.copy(),
                            pulse_phase=self.pulse_phase,
                            last_period=self.last_period,
                            last_lpc=self.last_lpc.copy())


def soft_clip(x: np.ndarray) -> np.ndarray:
    """Identity below the knee, smooth tanh compression above it."""
    ax = np.abs(x)
    over = ax > SOFT_CLIP_KNEE
    if not np.any(over):
        return x
    out = x.copy()
    span = 1.0 - SOFT_CLIP_KNEE
    out[over] = np.sign(x[over]) * (
        SOFT_CLIP_KNEE + span * np.tanh((ax[over] - SOFT_CLIP_KNEE) / span))
    return out


def _append_excitation(state: VocoderState, e: np.ndarray) -> None:
    state.excitation_memory = np.concatenate(
        [state.excitation_memory, e])[-EXC_MEMORY:]


def _pitch_copy(history: np.ndarray, period: float, n: int) -> np.ndarray:
    """The previous pitch cycle of the output, repeated to n samples.

    An integer lag is enough here: the fractional part of the period is
    carried by the pulse train, this term only sustains the waveform
    between pulses.
    """
    lag = int(np.clip(round(period), 1, EXC_MEMORY))
    return np.resize(history[-lag:], n)


def _pulse_train(state: VocoderState, period: float, voicing: float,
                 n: int) -> tuple[np.ndarray, int]:
    """Impulse train at the given period, phase carried across chunks.

    Pulses land at fractional positions; each is split across the two
    neighbouring samples.  Amplitude voicing*sqrt(period) makes the
    train's mean power voicing^2 regardless of period.  Returns the
    train and the number of pulses placed.
    """
    out = np.zeros(n)
    if voicing <= 0.0:
        state.pulse_phase = (state.pulse_phase + n) % max(period, 1.0)
        return out, 0
    amp = voicing * np.sqrt(period)
    pos = state.pulse_phase % period
    # phase counts samples since the last pulse, so the next pulse is due
    # at period - pos
    t = period - pos
    count = 0
    while t < n:
        i = int(np.floor(t))
        frac = t - i
        out[i] += amp * (1.0 - frac)
        if i + 1 < n:
            out[i + 1] += amp * frac
        t += period
        count += 1
    state.pulse_phase = (n - (t - period))
    state.last_period = period
    return out, count


def _excitation(state: VocoderState, features: FeatureVector, n: int):
    """Mixed excitation: pulses plus noise, unit power in expectation.

    Returns (excitation, energy_share): the share is 1 when the chunk
    contains a pulse and the noise power share otherwise — a chunk that
    falls between pitch pulses should only carry its noise energy, not
    borrow the missing pulse energy as extra noise.
    """
    v = float(np.clip(features.pitch_corr, 0.0, 1.0))
    e, n_pulses = _pulse_train(state, features.pitch_period, v, n)
    noise_power = max(1.0 - v * v, 0.0)
    if noise_power > 0.0:
        e += np.sqrt(noise_power) * state.rng.standard_normal(n)
    share = 1.0 if (n_pulses > 0 or v <= 0.0) else max(noise_power, 0.05)
    return e, share


def _solve_gain(zir: np.ndarray, forced: np.ndarray, target_energy: float) -> float:
    """Largest g >= 0 with ||zir + g*forced||^2 == target; 0 if none.

    Falling back to 0 keeps the zero-input response untouched when the
    ringing of previous frames alone already exceeds the target.
    """
    a = float(forced @ forced)
    b = 2.0 * float(zir @ forced)
    c = float(zir @ zir) - target_energy
    if a < 1e-30:
        return 0.0
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return 0.0
    g = (-b + np.sqrt(disc)) / (2.0 * a)
    return max(g, 0.0)


def _render(state: VocoderState, a_pred: np.ndarray, features: FeatureVector,
            power: float, n: int) -> np.ndarray:
    """Chunk loop shared by synthesis and backward extrapolation.

    a_pred holds the one-step prediction coefficients of the all-pole
    filter; power is the per-sample output power to aim for.
    """
    a_pred = np.asarray(a_pred, dtype=np.float64)
    state.last_lpc = a_pred.copy()
    if power <= SILENCE_POWER:
        # the band-energy floor encodes digital silence; render it as
        # silence rather than as floor-level noise
        state.lpc_memory = np.zeros(dsp.LPC_ORDER)
        _append_excitation(state, np.zeros(n))
        state.out_history = np.zeros(EXC_MEMORY)
        state.pulse_phase = (state.pulse_phase + n) % max(state.last_period, 1.0)
        return np.zeros(n)
    a_poly = np.concatenate([[1.0], -a_pred])
    v = float(np.clip(features.pitch_corr, 0.0, 1.0))
    target = power * CHUNK
    out = np.empty(n)
    for start in range(0, n, CHUNK):
        # deterministic base: the filter ringing continues the most
        # recent samples exactly at the seam, then hands over — by a
        # voicing-weighted crossfade — to the previous pitch cycle of
        # the output, which sustains the waveform between pulses the way
        # vocal-tract resonances do
        zi = lfiltic([1.0], a_poly, state.lpc_memory[::-1])
        zir, _ = lfilter([1.0], a_poly, np.zeros(CHUNK), zi=zi)
        base = zir
        if v > 0.0:
            ltp = _pitch_copy(state.out_history, features.pitch_period, CHUNK)
            w = v * _LTP_RAMP
            base = (1.0 - w) * zir + w * ltp
        e, share = _excitation(state, features, CHUNK)
        ring = float(base @ base)
        # the share caps only the energy *added* on top of the base: a
        # chunk between pitch pulses keeps the carried waveform and
        # merely limits its own noise contribution
        budget = min(target, ring + share * target)
        if ring > budget:
            # the carried waveform alone overshoots a falling energy
            # target; no gain can remove energy, so damp it instead
            g = 0.0
            chunk = soft_clip(base * np.sqrt(budget / max(ring, 1e-30)))
        else:
            forced = lfilter([1.0], a_poly, e)
            g = _solve_gain(base, forced, budget)
            chunk = soft_clip(base + g * forced)
        _append_excitation(state, g * e)
        state.out_history = np.concatenate(
            [state.out_history, chunk])[-EXC_MEMORY:]
        out[start:start + CHUNK] = chunk
        state.lpc_memory = chunk[-dsp.LPC_ORDER:].copy()
    return out


def synthesize(state: VocoderState, features: FeatureVector, n: int) -> np.ndarray:
    """Generate n samples (multiple of 80) conditioned on one feature vector.

    Per chunk: continue the filter ringing (zero-input response), add a
    gain-scaled filtered excitation, where the gain is chosen so chunk
    energy tracks the feature vector's implied signal power, then soft
    clip.  The filter memory advances with the clipped output.
    """
    if n % CHUNK != 0:
        raise ValueError(f"synthesis length must be a multiple of {CHUNK}")
    lpc = dsp.features_to_lpc(features)
    power = dsp.implied_frame_power(features.cepstrum)
    return _render(state, lpc.a, features, power, n)


def _teacher_force(state: VocoderState, samples: np.ndarray,
                   a_pred: np.ndarray, period: float) -> None:
    a_pred = np.asarray(a_pred, dtype=np.float64)
    a_poly = np.concatenate([[1.0], -a_pred])
    ctx = np.concatenate([state.lpc_memory, samples])
    # inverse filter: what excitation would have produced these samples
    e = lfilter(a_poly, [1.0], ctx)[dsp.LPC_ORDER:]
    _append_excitation(state, e)
    state.out_history = np.concatenate(
        [state.out_history, samples])[-EXC_MEMORY:]
    state.lpc_memory = samples[-dsp.LPC_ORDER:].copy()
    state.last_lpc = a_pred.copy()
    state.last_period = period
    # anchor the pulse train to the strongest excitation peak within the
    # most recent pitch cycle, so synthesis continues the true cycle in
    # phase rather than starting an unrelated one
    span = min(int(np.ceil(period)), EXC_MEMORY)
    window = state.excitation_memory[-span:]
    if span > 0 and np.any(window != 0.0):
        since_peak = span - 1 - int(np.argmax(np.abs(window)))
        state.pulse_phase = float(since_peak % period)
    else:
        state.pulse_phase = (state.pulse_phase + samples.shape[0]) % period


def update_with_known(state: VocoderState, samples: np.ndarray,
                      features: FeatureVector | None = None,
                      period: float | None = None) -> None:
    """Teacher-force true samples (80 or 160): no audio is produced.

    The filter memory is overwritten with the samples, their excitation
    is recovered by inverse filtering (with the feature-implied filter
    when features are given, else the most recent one), and the pulse
    phase is re-anchored to the recovered cycle.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] not in (CHUNK, 2 * CHUNK):
        raise ValueError("teacher forcing takes 80 or 160 samples")
    if features is not None:
        a_pred = dsp.features_to_lpc(features).a
        p = float(features.pitch_period) if period is None else float(period)
    else:
        a_pred = state.last_lpc
        p = state.last_period if period is None else float(period)
    _teacher_force(state, samples, a_pred, max(p, 1.0))


def extrapolate_backward(future: np.ndarray, features: FeatureVector,
                         rng: np.random.Generator) -> np.ndarray:
    """80 samples leading into a received frame.

    The frame is time-reversed and teacher-forced into a fresh synthesis
    state, one conditioned chunk is rendered, and that chunk is reversed
    back: neither an all-pole envelope nor a pitch period is changed by
    time reversal, so continuing the reversed frame yields a plausible
    lead-in to the original.  The all-pole model is fit to the reversed
    frame itself — a far sharper description of this specific frame than
    its band envelope — while the feature vector still supplies pitch,
    voicing and energy.  The seam with future[0] is carried by the
    filter ringing, which continues the reversed samples smoothly.
    """
    future = np.asarray(future, dtype=np.float64)
    if future.shape != (2 * CHUNK,):
        raise ValueError("backward extrapolation needs one 160-sample frame")
    rev = future[::-1]
    fit = burg_fit(rev)
    if fit.degenerate:
        a_pred = dsp.features_to_lpc(features).a
    else:
        # bandwidth expansion: scaling the i-th coefficient by gamma^i
        # scales every pole radius by gamma, pulling poles the fit put
        # on the unit circle (pure tones, and the spurious near-circle
        # poles such fits leave at arbitrary frequencies) strictly inside
        a_pred = fit.lpc * (0.98 ** np.arange(1, dsp.LPC_ORDER + 1))
    state = VocoderState(rng=rng)
    _teacher_force(state, rev, a_pred, max(float(features.pitch_period), 1.0))
    power = dsp.implied_frame_power(features.cepstrum)
    chunk = _render(state, a_pred, features, power, CHUNK)
    return chunk[::-1]


def cross_fade(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raised-cosine blend running from a at the start to b at the end."""
    if a.shape != b.shape:
        raise ValueError("cross-fade operands must match")
    n = a.shape[0]
    w = np.cos(np.pi * (np.arange(n) + 0.5) / (2.0 * n)) ** 2
    return b + w * (a - b)
