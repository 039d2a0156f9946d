"""Acoustic front end for the 16 kHz concealment stack.

Each 10 ms frame (160 samples) is described by a 20-dimensional feature
vector: 18 cepstral coefficients derived from triangular Bark-spaced band
energies of a 20 ms Hann-windowed spectrum, plus a pitch period and a
pitch correlation from normalized autocorrelation.  The inverse path
turns a feature vector back into an order-16 all-pole filter for
synthesis.

Conventions (fixed for the whole package):

* 320-sample analysis window, 161-bin one-sided power spectrum.
* 18 triangular bands with edges equally spaced on the Bark scale
  between 0 and 8 kHz (table in ``docs/bark_bands.md``).
* Band log-energies are natural logs scaled by 1/sqrt(18) so that the
  first cepstral coefficient equals the mean log band energy.  With the
  orthonormal DCT-II this makes c0 track frame log-energy one to one:
  scaling the input by g shifts c0 by exactly 2*ln(g).
* Energy floor 1e-9 per band, so silence maps to c0 = ln(1e-9).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

SAMPLE_RATE = 16000
FRAME_SIZE = 160          # 10 ms hop
WINDOW_SIZE = 320         # 20 ms analysis window
NB_BANDS = 18
NB_FEATURES = 20          # 18 cepstra + pitch period + pitch correlation
SPEC_BINS = WINDOW_SIZE // 2 + 1   # 161
LPC_ORDER = 16
PITCH_MIN = 32
PITCH_MAX = 256
DEFAULT_PITCH = 100.0
ENERGY_FLOOR = 1e-9
BANDWIDTH_EXPANSION = 0.995
OCTAVE_BIAS = 0.98
# natural log scaled so c0 == mean log band energy (see module docstring)
BAND_LOG_SCALE = 1.0 / np.sqrt(NB_BANDS)


class FeatureVector(NamedTuple):
    """Per-frame acoustic description: cepstrum + pitch period + correlation."""

    cepstrum: np.ndarray      # shape (18,)
    pitch_period: float       # samples, in [32, 256]
    pitch_corr: float         # in [0, 1]


class LpcCoeffs(NamedTuple):
    """All-pole model: x[n] ~ sum(a[i] * x[n-1-i]) + gain * e[n]."""

    a: np.ndarray             # shape (16,), predictor sign convention
    gain: float               # > 0, sqrt of residual power


def _bark(f):
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def _band_edges_hz() -> np.ndarray:
    """20 band-edge frequencies, equally spaced in Bark between 0 and 8 kHz."""
    grid_f = np.linspace(0.0, SAMPLE_RATE / 2, 16001)
    grid_b = _bark(grid_f)
    edges_b = np.linspace(0.0, grid_b[-1], NB_BANDS + 2)
    return np.interp(edges_b, grid_b, grid_f)


def _band_matrix() -> np.ndarray:
    """(18, 161) triangular weights over the one-sided spectrum bins.

    The first band extends flat down to DC and the last flat up to
    Nyquist, so the weights of all bands sum to one at every bin and
    band energies keep the whole Parseval energy.
    """
    edges = _band_edges_hz()
    bin_hz = np.arange(SPEC_BINS) * (SAMPLE_RATE / WINDOW_SIZE)
    mat = np.zeros((NB_BANDS, SPEC_BINS))
    for b in range(NB_BANDS):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        if b == 0:
            rising = np.where(bin_hz <= mid, 1.0, rising)
        if b == NB_BANDS - 1:
            falling = np.where(bin_hz >= mid, 1.0, falling)
        mat[b] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return mat


def _dct_matrix() -> np.ndarray:
    """Orthonormal DCT-II matrix, shape (18, 18); inverse is the transpose."""
    n = NB_BANDS
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * k * (i + 0.5) / n)
    mat *= np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    return mat


BAND_EDGES_HZ = _band_edges_hz()
BAND_MATRIX = _band_matrix()
BAND_AREAS = BAND_MATRIX.sum(axis=1)
DCT_MATRIX = _dct_matrix()
ANALYSIS_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WINDOW_SIZE) / WINDOW_SIZE)
WINDOW_POWER = float(np.sum(ANALYSIS_WINDOW ** 2))   # 120.0 for periodic Hann
# per-bin weights that make the one-sided power spectrum sum to the
# windowed-frame energy (Parseval)
_BIN_WEIGHT = np.full(SPEC_BINS, 2.0 / WINDOW_SIZE)
_BIN_WEIGHT[0] = 1.0 / WINDOW_SIZE
_BIN_WEIGHT[-1] = 1.0 / WINDOW_SIZE


def power_spectrum(window: np.ndarray) -> np.ndarray:
    """One-sided power spectrum of a 320-sample window, Parseval-normalized."""
    spec = np.fft.rfft(window * ANALYSIS_WINDOW)
    return _BIN_WEIGHT * (spec.real ** 2 + spec.imag ** 2)


def band_energies(power: np.ndarray) -> np.ndarray:
    """Triangle-weighted mean power per band; flat spectrum gives flat bands."""
    return (BAND_MATRIX @ power) / BAND_AREAS


def log_band_cepstrum(energies: np.ndarray) -> np.ndarray:
    """Floor, scaled-log and DCT in one step; used by every analysis path."""
    logs = BAND_LOG_SCALE * np.log(np.maximum(energies, ENERGY_FLOOR))
    return DCT_MATRIX @ logs


def cepstrum_from_bands(log_bands: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of 18 log band energies."""
    log_bands = np.asarray(log_bands, dtype=np.float64)
    if log_bands.shape != (NB_BANDS,):
        raise ValueError(f"expected {NB_BANDS} log band energies, got {log_bands.shape}")
    return DCT_MATRIX @ log_bands


def bands_from_cepstrum(cepstrum: np.ndarray) -> np.ndarray:
    """Inverse transform; exact round trip with cepstrum_from_bands."""
    cepstrum = np.asarray(cepstrum, dtype=np.float64)
    if cepstrum.shape != (NB_BANDS,):
        raise ValueError(f"expected {NB_BANDS} cepstral coefficients, got {cepstrum.shape}")
    return DCT_MATRIX.T @ cepstrum


def estimate_pitch(window: np.ndarray, prev_period: float = DEFAULT_PITCH):
    """Pitch period and correlation by normalized autocorrelation.

    Parameters
    ----------
    window : ndarray
        320 samples.
    prev_period : float
        Previous frame's period; candidate lags are biased toward it by
        0.98 ** |log2(lag / prev_period)| to suppress octave jumps.

    Returns
    -------
    (period, corr) : (float, float)
        Period in samples clamped to [32, 256]; correlation clamped to
        [0, 1].  Degenerate input (near-zero variance) returns
        (prev_period, 0.0).
    """
    x = np.asarray(window, dtype=np.float64)
    if x.shape != (WINDOW_SIZE,):
        raise ValueError(f"expected {WINDOW_SIZE} samples, got {x.shape}")
    x = x - x.mean()
    energy = float(x @ x)
    if energy < 1e-18:
        return float(np.clip(prev_period, PITCH_MIN, PITCH_MAX)), 0.0

    lags = np.arange(PITCH_MIN, PITCH_MAX + 1)
    # normalized autocorrelation over the lag-delayed overlap region;
    # numerator for all lags at once via a zero-padded FFT
    spec = np.fft.rfft(x, 2 * WINDOW_SIZE)
    auto = np.fft.irfft(spec.real ** 2 + spec.imag ** 2)
    num = auto[lags]
    cum2 = np.concatenate(([0.0], np.cumsum(x * x)))
    ea = cum2[-1] - cum2[lags]          # energy of x[lag:]
    eb = cum2[WINDOW_SIZE - lags]       # energy of x[:-lag]
    corr = num / np.sqrt(ea * eb + 1e-30)

    prev = float(np.clip(prev_period, PITCH_MIN, PITCH_MAX))
    bias = OCTAVE_BIAS ** np.abs(np.log2(lags / prev))
    j = int(np.argmax(corr * bias))

    # prefer the shortest sub-multiple that correlates almost as well:
    # a truly periodic signal scores high at every multiple of its
    # period, and picking a multiple would halve the synthesis pitch
    best_lag = int(lags[j])
    for div in range(int(np.floor(best_lag / PITCH_MIN)), 1, -1):
        cand = int(round(best_lag / div))
        if cand < PITCH_MIN:
            continue
        lo = max(cand - 2, PITCH_MIN) - PITCH_MIN
        hi = min(cand + 2, PITCH_MAX) - PITCH_MIN
        jj = lo + int(np.argmax(corr[lo:hi + 1]))
        if corr[jj] > 0.87 * corr[j] and corr[jj] > 0.4:
            j = jj
            break

    # parabolic refinement around the integer peak of the raw correlation
    period = float(lags[j])
    if 0 < j < lags.size - 1:
        y0, y1, y2 = corr[j - 1], corr[j], corr[j + 1]
        denom = y0 - 2.0 * y1 + y2
        if abs(denom) > 1e-12:
            delta = 0.5 * (y0 - y2) / denom
            if -1.0 < delta < 1.0:
                period += delta
    best = float(np.clip(corr[j], 0.0, 1.0))
    return float(np.clip(period, PITCH_MIN, PITCH_MAX)), best


def analyze_frame(window: np.ndarray, prev_period: float = DEFAULT_PITCH) -> FeatureVector:
    """Compute the 20-dimensional feature vector of one 20 ms window.

    The window covers the current 10 ms frame plus the previous one; the
    returned features describe the 10 ms centered in the window.
    All-zero input yields the floor cepstrum (c0 = ln(1e-9), rest 0),
    pitch_corr 0 and the carried-over pitch period.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (WINDOW_SIZE,):
        raise ValueError(f"expected {WINDOW_SIZE} samples, got {window.shape}")
    cepstrum = log_band_cepstrum(band_energies(power_spectrum(window)))
    period, corr = estimate_pitch(window, prev_period)
    return FeatureVector(cepstrum=cepstrum, pitch_period=period, pitch_corr=corr)


def _levinson(r: np.ndarray, order: int):
    """Levinson-Durbin on autocorrelation r[0..order].

    Returns (a, err): predictor coefficients (x[n] ~ sum a[i] x[n-1-i])
    and the final prediction error power.
    """
    a = np.zeros(order)
    err = float(r[0])
    if err <= 0.0:
        return a, 0.0
    for m in range(order):
        acc = float(r[m + 1]) - float(a[:m] @ r[m:0:-1])
        k = acc / err
        k = float(np.clip(k, -0.9999, 0.9999))
        a_new = a.copy()
        a_new[m] = k
        a_new[:m] = a[:m] - k * a[:m][::-1]
        a = a_new
        err *= (1.0 - k * k)
        if err <= 0.0:
            err = 1e-30
            break
    return a, err


def features_to_lpc(features: FeatureVector) -> LpcCoeffs:
    """Turn a feature vector into an order-16 all-pole filter.

    Band energies are interpolated onto the 161-bin linear grid (log
    domain, per-bin density), converted to autocorrelation by inverse
    FFT, fitted by Levinson-Durbin, then bandwidth-expanded by
    0.995**i for stability margin.
    """
    log_bands = bands_from_cepstrum(features.cepstrum)
    # band values are per-bin power densities; interpolate in the log
    # domain across band centers, holding the ends flat
    log_density = np.minimum(log_bands / BAND_LOG_SCALE, 60.0)
    centers = BAND_EDGES_HZ[1:-1]
    bin_hz = np.arange(SPEC_BINS) * (SAMPLE_RATE / WINDOW_SIZE)
    spectrum = np.exp(np.interp(bin_hz, centers, log_density))
    # cap the dynamic range at 60 dB: keeps the autocorrelation
    # numerically positive definite so the fit stays minimum phase even
    # for adversarial cepstra, at no audible cost for a smoothed envelope
    spectrum = np.maximum(spectrum, spectrum.max() * 1e-6)

    r = np.fft.irfft(spectrum, n=WINDOW_SIZE)[: LPC_ORDER + 1]
    r[0] *= 1.0 + 1e-9
    a, err = _levinson(r, LPC_ORDER)
    a = a * BANDWIDTH_EXPANSION ** np.arange(1, LPC_ORDER + 1)
    # safety net: shrink further on the rare Schur-test failure
    for _ in range(4):
        if _schur_stable(a):
            break
        a = a * 0.98 ** np.arange(1, LPC_ORDER + 1)
    gain = float(np.sqrt(max(err, 1e-30)))
    return LpcCoeffs(a=a, gain=gain)


def _schur_stable(a: np.ndarray) -> bool:
    """Schur-Cohn test: True when all roots are strictly inside the circle."""
    aa = np.asarray(a, dtype=np.float64).copy()
    for m in range(aa.size, 0, -1):
        k = aa[m - 1]
        if not np.isfinite(k) or abs(k) >= 1.0 - 1e-7:
            return False
        aa = (aa[: m - 1] + k * aa[: m - 1][::-1]) / (1.0 - k * k)
    return True


def implied_frame_power(cepstrum: np.ndarray) -> float:
    """Mean-square sample value implied by a cepstrum.

    Inverts the analysis scaling: band densities times triangle masses
    sum approximately to the windowed-frame energy, so dividing by the
    window power gives the per-sample power of a stationary signal with
    this spectrum.
    """
    log_bands = bands_from_cepstrum(np.asarray(cepstrum, dtype=np.float64))
    densities = np.exp(np.minimum(log_bands / BAND_LOG_SCALE, 60.0))
    return float(np.sum(densities * BAND_AREAS) / WINDOW_POWER)


class FeatureStream:
    """Streaming analyzer: keeps the pitch-continuity state across frames."""

    def __init__(self):
        self.prev_period = DEFAULT_PITCH

    def analyze(self, window: np.ndarray) -> FeatureVector:
        f = analyze_frame(window, self.prev_period)
        self.prev_period = f.pitch_period
        return f
