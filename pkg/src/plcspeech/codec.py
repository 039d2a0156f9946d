"""A small stateful speech codec used to exercise decoder-state feedback.

Structure per 10 ms frame (90 bytes):

    byte 0        long-term lag minus 32 (lags 32..287)
    byte 1        long-term gain index (uniform in [0, 1.25])
    bytes 2..9    16 reflection coefficients, one nibble each
    bytes 10..89  160 innovation samples, 4-bit mu-law each

The decoder is a classic two-stage predictor: a long-term (pitch) tap
over its own past short-term residual, plus an order-16 short-term
all-pole filter over its own past output.  Both memories persist across
frames, which is exactly why packet loss hurts: after a gap the
predictors reference whatever the decoder has in state.  conceal_frame
writes externally synthesized audio into those memories so decoding can
resume from plausible history.

The innovation scale is backward-adaptive (derived from previously
decoded innovation), so no scale is transmitted and encoder/decoder
stay in lockstep through a local decode at the encoder.
"""

from __future__ import annotations

import numpy as np

from . import dsp
from .burg import burg_fit, reflections_to_lpc
from .predictor import FormatError

FRAME = dsp.FRAME_SIZE          # 160
ORDER = dsp.LPC_ORDER           # 16
LAG_MIN = 32
LAG_MAX = 287
PACKET_BYTES = 90
GAIN_MAX = 1.25
MU = 255.0
SCALE_MIN = 1e-4
SCALE_MAX = 0.5
SCALE_HEADROOM = 3.0            # innovation quantizer works in +-3 sigma
HISTORY = LAG_MAX + FRAME       # residual history needed for the lag search

# reflection quantizer: denser toward +-1 where stability margins matter
K_LEVELS = np.sin(np.pi / 2.0 * (np.arange(16) - 7.5) / 7.9)


def _quantize_reflection(k: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(k[:, None] - K_LEVELS[None, :]), axis=1).astype(np.uint8)


def _mu_encode(x: np.ndarray) -> np.ndarray:
    """Values in [-1, 1] to 4-bit indices."""
    x = np.clip(x, -1.0, 1.0)
    y = np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)
    return np.round((y + 1.0) * 7.5).astype(np.uint8)


def _mu_decode(idx: np.ndarray) -> np.ndarray:
    y = np.asarray(idx, dtype=np.float64) / 7.5 - 1.0
    return np.sign(y) * (np.expm1(np.abs(y) * np.log1p(MU))) / MU


def _pack_nibbles(vals: np.ndarray) -> bytes:
    vals = np.asarray(vals, dtype=np.uint8)
    return ((vals[0::2] << 4) | vals[1::2]).tobytes()


def _unpack_nibbles(blob: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(blob, dtype=np.uint8)
    out = np.empty(count, dtype=np.uint8)
    out[0::2] = raw >> 4
    out[1::2] = raw & 0x0F
    return out


class Decoder:
    """Stateful decoder; one instance per stream."""

    def __init__(self):
        self.res_hist = np.zeros(HISTORY)   # past short-term residual
        self.out_hist = np.zeros(ORDER)     # past output samples
        self.lpc = np.zeros(ORDER)          # current short-term predictor
        self.scale = 0.01                   # backward-adaptive innovation scale

    def decode_frame(self, packet: bytes) -> np.ndarray:
        lag, gain, lpc, innov_idx = parse_packet(packet)
        self.lpc = lpc
        dec = _mu_decode(innov_idx) * SCALE_HEADROOM * self.scale

        hist = self.res_hist
        res = np.empty(FRAME)
        n_hist = hist.shape[0]
        # sequential long-term prediction: lags below 160 reference
        # residual reconstructed earlier in this same frame
        for n in range(FRAME):
            past = hist[n_hist - lag + n] if n < lag else res[n - lag]
            res[n] = dec[n] + gain * past

        out = np.empty(FRAME)
        mem = self.out_hist
        for n in range(FRAME):
            out[n] = res[n] + float(lpc @ mem[::-1])
            mem = np.concatenate([mem[1:], [out[n]]])

        self.res_hist = np.concatenate([hist[FRAME:], res])
        self.out_hist = out[-ORDER:].copy()
        self._adapt_scale(dec)
        return out

    def conceal_frame(self, samples: np.ndarray) -> None:
        """Write externally concealed audio into the prediction memories."""
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape != (FRAME,):
            raise ValueError(f"concealment frames carry {FRAME} samples")
        # residual the current short-term filter would have produced
        ext = np.concatenate([self.out_hist, samples])
        res = np.empty(FRAME)
        for n in range(FRAME):
            res[n] = samples[n] - float(self.lpc @ ext[n:n + ORDER][::-1])
        self.res_hist = np.concatenate([self.res_hist[FRAME:], res])
        self.out_hist = samples[-ORDER:].copy()

    def _adapt_scale(self, decoded_innovation: np.ndarray) -> None:
        rms = float(np.sqrt(np.mean(decoded_innovation ** 2)))
        self.scale = float(np.clip(0.25 * self.scale + 0.9 * rms,
                                   SCALE_MIN, SCALE_MAX))


class Encoder:
    """Analysis-by-local-decode encoder; keeps a decoder in lockstep."""

    def __init__(self):
        self.local = Decoder()
        self.in_hist = np.zeros(ORDER)      # past input samples for analysis

    def encode_frame(self, frame: np.ndarray) -> bytes:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (FRAME,):
            raise ValueError(f"frames carry {FRAME} samples")

        fit = burg_fit(frame, ORDER)
        k_idx = _quantize_reflection(fit.reflection)
        lpc = reflections_to_lpc(K_LEVELS[k_idx])

        # short-term residual of the clean input under the quantized filter
        ext = np.concatenate([self.in_hist, frame])
        target = np.empty(FRAME)
        for n in range(FRAME):
            target[n] = frame[n] - float(lpc @ ext[n:n + ORDER][::-1])

        lag, gain_idx = self._search_lag(target)
        gain = gain_idx / 255.0 * GAIN_MAX

        # closed-loop innovation quantization against the decoder state
        hist = self.local.res_hist
        n_hist = hist.shape[0]
        scale = self.local.scale
        res = np.empty(FRAME)
        innov_idx = np.empty(FRAME, dtype=np.uint8)
        for n in range(FRAME):
            past = hist[n_hist - lag + n] if n < lag else res[n - lag]
            pred = gain * past
            idx = _mu_encode(np.array([(target[n] - pred) /
                                       (SCALE_HEADROOM * scale)]))[0]
            innov_idx[n] = idx
            res[n] = _mu_decode(np.array([idx]))[0] * SCALE_HEADROOM * scale + pred

        packet = build_packet(lag, gain_idx, k_idx, innov_idx)
        self.in_hist = frame[-ORDER:].copy()
        self.local.decode_frame(packet)
        return packet

    def _search_lag(self, target: np.ndarray) -> tuple:
        """Best long-term lag/gain against the local decoder's residual."""
        hist = self.local.res_hist
        best_lag, best_score, best_gain = LAG_MIN, -1.0, 0.0
        # open-loop search on the frame's first half (always fully in
        # history for every admissible lag)
        seg = target[:LAG_MIN]
        n_hist = hist.shape[0]
        for lag in range(LAG_MIN, LAG_MAX + 1):
            ref = hist[n_hist - lag: n_hist - lag + LAG_MIN]
            e = float(ref @ ref)
            if e < 1e-12:
                continue
            c = float(seg @ ref)
            score = c * c / e
            if score > best_score:
                best_score, best_lag, best_gain = score, lag, c / e
        gain_idx = int(np.clip(round(best_gain / GAIN_MAX * 255.0), 0, 255))
        return best_lag, gain_idx


def build_packet(lag: int, gain_idx: int, k_idx: np.ndarray,
                 innov_idx: np.ndarray) -> bytes:
    return (bytes([lag - LAG_MIN, gain_idx])
            + _pack_nibbles(k_idx) + _pack_nibbles(innov_idx))


def parse_packet(packet: bytes):
    """Validate and unpack one frame packet."""
    if not isinstance(packet, (bytes, bytearray)):
        raise FormatError("packet must be bytes")
    if len(packet) != PACKET_BYTES:
        raise FormatError(f"packet is {len(packet)} bytes, expected {PACKET_BYTES}")
    lag = packet[0] + LAG_MIN
    gain = packet[1] / 255.0 * GAIN_MAX
    k_idx = _unpack_nibbles(packet[2:10], ORDER)
    lpc = reflections_to_lpc(K_LEVELS[k_idx])
    innov_idx = _unpack_nibbles(packet[10:], FRAME)
    return lag, gain, lpc, innov_idx


def encode_stream(samples: np.ndarray) -> list:
    """Encode padded audio into a list of per-frame packets."""
    samples = np.asarray(samples, dtype=np.float64)
    pad = (-samples.shape[0]) % FRAME
    if pad:
        samples = np.concatenate([samples, np.zeros(pad)])
    enc = Encoder()
    return [enc.encode_frame(f) for f in samples.reshape(-1, FRAME)]
