"""All-pole analysis of short segments by reflection-coefficient descent.

Fits an order-16 model to each 5 ms half (80 samples) of a frame by
minimizing forward plus backward prediction error, then converts the
model spectrum into the same scaled-log Bark cepstrum the windowed front
end produces.  This gives per-frame spectral evidence that does not need
the previous frame, so it stays computable on the first frame after a
loss, and one lost frame costs exactly one of these vectors.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import dsp

BURG_ORDER = 16
HALF_FRAME = dsp.FRAME_SIZE // 2   # 80 samples
# makes the model spectrum commensurate with the windowed band analysis:
# a unit-power white segment lands on the same band densities either way
PSD_SCALE = dsp.WINDOW_POWER / (dsp.WINDOW_SIZE / 2)


class BurgFit(NamedTuple):
    reflection: np.ndarray     # shape (order,), |k| <= 1
    lpc: np.ndarray            # shape (order,), predictor sign convention
    residual_energy: float     # per-sample residual power, >= 0
    degenerate: bool


def burg_fit(segment: np.ndarray, order: int = BURG_ORDER) -> BurgFit:
    """Fit an all-pole model to a segment by the forward/backward method.

    Parameters
    ----------
    segment : ndarray
        Real samples, length > order.
    order : int
        Model order.

    Returns
    -------
    BurgFit
        Reflection coefficients (each |k| <= 1 by construction), the
        equivalent predictor coefficients (x[n] ~ sum a[i] x[n-1-i]),
        and the residual power.  An all-zero segment comes back
        degenerate with zero coefficients.
    """
    x = np.asarray(segment, dtype=np.float64)
    if x.ndim != 1 or x.size <= order:
        raise ValueError(f"need a 1-d segment longer than {order}, got {x.shape}")
    energy = float(x @ x)
    if energy <= 0.0:
        return BurgFit(np.zeros(order), np.zeros(order), 0.0, True)

    err = energy / x.size
    f = x[1:].copy()
    b = x[:-1].copy()
    a_poly = np.array([1.0])
    ks = np.zeros(order)
    for m in range(order):
        den = float(f @ f + b @ b)
        if den < 1e-30:
            break
        k = -2.0 * float(f @ b) / den
        ks[m] = k
        a_poly = np.concatenate([a_poly, [0.0]])
        a_poly = a_poly + k * a_poly[::-1]
        err *= max(1.0 - k * k, 0.0)
        f, b = f[1:] + k * b[1:], b[:-1] + k * f[:-1]
    # predictor sign: x[n] ~ sum a[i] x[n-1-i]
    lpc = -a_poly[1:]
    if lpc.size < order:
        lpc = np.concatenate([lpc, np.zeros(order - lpc.size)])
    return BurgFit(-ks, lpc, float(err), False)


def reflections_to_lpc(reflection: np.ndarray) -> np.ndarray:
    """Rebuild predictor coefficients from reflection coefficients.

    Inverse of the lattice step inside burg_fit, so
    reflections_to_lpc(fit.reflection) == fit.lpc exactly.
    """
    a_poly = np.array([1.0])
    for kr in np.asarray(reflection, dtype=np.float64):
        a_poly = np.concatenate([a_poly, [0.0]])
        a_poly = a_poly + (-kr) * a_poly[::-1]
    return -a_poly[1:]


def burg_reflections_batch(segments: np.ndarray, order: int = BURG_ORDER) -> np.ndarray:
    """Reflection coefficients for many segments at once, shape (M, order).

    Same recursion as burg_fit vectorized across rows; used for mass
    invariant checks.  Rows with zero energy give zero coefficients.
    """
    x = np.asarray(segments, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] <= order:
        raise ValueError(f"need (M, N) segments with N > {order}, got {x.shape}")
    f = x[:, 1:].copy()
    b = x[:, :-1].copy()
    ks = np.zeros((x.shape[0], order))
    for m in range(order):
        den = np.einsum("ij,ij->i", f, f) + np.einsum("ij,ij->i", b, b)
        num = -2.0 * np.einsum("ij,ij->i", f, b)
        k = np.where(den < 1e-30, 0.0, num / np.maximum(den, 1e-300))
        ks[:, m] = k
        kc = k[:, None]
        f, b = f[:, 1:] + kc * b[:, 1:], b[:, :-1] + kc * f[:, :-1]
    return -ks


def burg_cepstrum(segment: np.ndarray) -> np.ndarray:
    """Scaled-log Bark cepstrum of the fitted all-pole model spectrum.

    Evaluates the model power spectrum on the standard 161-bin grid,
    averages it into the 18 triangular bands and applies the shared
    log/DCT convention.  Degenerate input returns the floor cepstrum.
    Scaling the segment by g shifts the first coefficient by 2*ln(g).
    """
    fit = burg_fit(segment, BURG_ORDER)
    if fit.degenerate:
        return dsp.log_band_cepstrum(np.zeros(dsp.NB_BANDS))
    a_poly = np.concatenate(([1.0], -fit.lpc))
    response = np.fft.rfft(a_poly, dsp.WINDOW_SIZE)
    denom = np.maximum(response.real ** 2 + response.imag ** 2, 1e-30)
    spectrum = PSD_SCALE * fit.residual_energy / denom
    return dsp.log_band_cepstrum(dsp.band_energies(spectrum))


def burg_features_for_frame(frame: np.ndarray) -> np.ndarray:
    """Concatenated half-frame cepstra of one 10 ms frame, shape (36,)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (dsp.FRAME_SIZE,):
        raise ValueError(f"expected {dsp.FRAME_SIZE} samples, got {frame.shape}")
    return np.concatenate([
        burg_cepstrum(frame[:HALF_FRAME]),
        burg_cepstrum(frame[HALF_FRAME:]),
    ])
