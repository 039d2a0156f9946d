"""Streaming concealment engine.

Frames are 10 ms (160 samples); packets carry two frames.  Every frame
is classified by what happened to it and to its predecessor:

    K   received, predecessor received   — normal operation
    U0  lost, predecessor received       — first lost frame of a burst
    U   lost, predecessor lost           — burst continuation
    K0  received, predecessor lost       — recovery frame

Feature slots are centered between frame boundaries: the vector for
slot i describes samples [160i-80, 160i+80), so every synthesized
80-sample chunk is conditioned on the vector whose analysis window is
centered on it.  A burst of k lost frames consumes k+1 predicted
vectors: two on the U0 frame (its own slot plus the one straddling into
the next frame), one per U frame.  The K0 frame re-predicts the
straddling slot from half-frame all-pole evidence before resynthesis;
that replaces the pending vector and is counted separately.

Modes:
    causal     emit as we go; recovery cross-fades synthesis into truth
               over the first half of the K0 frame.
    noncausal  emit 80 samples late; received frames pass through
               bit-exact, and recovery blends a backward extrapolation
               of the K0 frame into the concealment inside the delay
               buffer, so truth is never modified.
    codec      frames arrive as codec packets; concealment output is
               written into the decoder's prediction memories so
               decoding after the loss continues from plausible state.
               No cross-fade: the decoder's own state feedback bridges
               the seam.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp, vocoder
from .burg import burg_features_for_frame
from .dsp import FRAME_SIZE, FeatureVector
from .predictor import Predictor, apply_burst_fade

HALF = FRAME_SIZE // 2

KIND_K = "K"
KIND_U0 = "U0"
KIND_U = "U"
KIND_K0 = "K0"

MODES = ("causal", "noncausal", "codec")


def vectors_to_predict(k: int) -> tuple[int, int]:
    """(predicted vectors, missing all-pole summaries) for a k-frame burst.

    The first lost frame consumes two predictions (its own slot plus the
    straddling one) and each further lost frame one more, so a burst of
    k frames consumes k+1 predictions and leaves k frames without an
    all-pole residual summary.  The recovery-frame re-prediction is
    accounted separately and is not included here.
    """
    if k < 0:
        raise ValueError("burst length must be non-negative")
    return (k + 1, k) if k else (0, 0)


class FreezePredictor:
    """Baseline feature predictor: repeat the last received vector.

    Interface-compatible with Predictor.step; used both as an engine
    baseline and as the reference the trained network must beat.
    """

    def __init__(self):
        self.last = FeatureVector(
            cepstrum=dsp.log_band_cepstrum(np.zeros(dsp.NB_BANDS)),
            pitch_period=dsp.DEFAULT_PITCH, pitch_corr=0.0)

    def step(self, features, burg_vec, lost):
        if not lost and features is not None:
            self.last = features
        return self.last

    def reset(self):
        self.__init__()


@dataclass
class BurstRecord:
    """Per-burst accounting used by the scheduling tests."""

    lost_frames: int = 0
    consumed_predictions: int = 0
    missing_burg: int = 0
    refresh_predictions: int = 0


@dataclass
class EngineStats:
    frames: dict = field(default_factory=lambda: {k: 0 for k in
                                                  (KIND_K, KIND_U0, KIND_U, KIND_K0)})
    consumed_predictions: int = 0
    refresh_predictions: int = 0
    missing_burg: int = 0
    cross_fades: int = 0
    bursts: list = field(default_factory=list)
    time_by_kind: dict = field(default_factory=lambda: {k: [0.0, 0] for k in
                                                        (KIND_K, KIND_U0, KIND_U, KIND_K0)})

    def rtf_by_kind(self) -> dict:
        out = {}
        for kind, (total, count) in self.time_by_kind.items():
            out[kind] = (total / count) / (FRAME_SIZE / dsp.SAMPLE_RATE) if count else 0.0
        return out

    def realtime_factor(self) -> float:
        total = sum(t for t, _ in self.time_by_kind.values())
        count = sum(c for _, c in self.time_by_kind.values())
        return (total / count) / (FRAME_SIZE / dsp.SAMPLE_RATE) if count else 0.0


class Engine:
    """One concealment stream.

    predictor: anything with step(features, burg, lost) -> FeatureVector
    and reset(); pass a Predictor wrapping trained weights, or
    FreezePredictor for the repeat-last baseline.  In codec mode,
    decoder must be a codec.Decoder and step() takes packets.
    """

    def __init__(self, predictor, mode: str = "causal", seed: int = 0,
                 decoder=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if (mode == "codec") != (decoder is not None):
            raise ValueError("codec mode requires a decoder (and only codec mode)")
        self.predictor = predictor
        self.mode = mode
        self.decoder = decoder
        self.voc = vocoder.VocoderState(rng=np.random.default_rng(seed))
        self.stream = dsp.FeatureStream()
        self.prev_frame = np.zeros(FRAME_SIZE)
        self.prev_received = True
        self.pending: FeatureVector | None = None
        self.frames_lost = 0
        self.tail = np.zeros(HALF)          # noncausal delay buffer
        self.stats = EngineStats()
        self._burst: BurstRecord | None = None
        self._failed = False

    # -- public ------------------------------------------------------------

    @property
    def emission_delay(self) -> int:
        """Output delay in samples relative to the input frame clock."""
        return HALF if self.mode == "noncausal" else 0

    def step(self, frame) -> np.ndarray:
        """Process one 10 ms slot; frame is samples/packet or None if lost.

        Once a step has raised, the stream state is unreliable and every
        further call raises RuntimeError.
        """
        if self._failed:
            raise RuntimeError("engine is unusable after a failed step")
        t0 = time.perf_counter()
        try:
            received = frame is not None
            if received and self.mode != "codec":
                frame = np.asarray(frame, dtype=np.float64)
                if frame.shape != (FRAME_SIZE,):
                    raise ValueError(f"frames carry {FRAME_SIZE} samples")
            if received:
                kind = KIND_K if self.prev_received else KIND_K0
            else:
                kind = KIND_U0 if self.prev_received else KIND_U
            out = getattr(self, "_" + kind.lower())(frame)
        except Exception:
            self._failed = True
            raise
        self.prev_received = received
        self.stats.frames[kind] += 1
        acc = self.stats.time_by_kind[kind]
        acc[0] += time.perf_counter() - t0
        acc[1] += 1
        return out

    def flush(self) -> np.ndarray:
        """Remaining buffered samples (noncausal mode only)."""
        if self._burst is not None:
            self.stats.bursts.append(self._burst)
            self._burst = None
        if self.mode == "noncausal":
            tail, self.tail = self.tail, np.zeros(HALF)
            return tail
        return np.zeros(0)

    def process(self, samples: np.ndarray, frame_lost) -> np.ndarray:
        """Run a whole utterance; returns audio aligned with the input.

        samples: 1-D float audio, padded to whole frames.  frame_lost:
        per-frame loss flags.  Codec-mode engines take packets per
        frame instead via step(); this helper is for PCM modes.
        """
        if self.mode == "codec":
            raise ValueError("process() is for PCM modes; drive codec mode via step()")
        samples = np.asarray(samples, dtype=np.float64)
        n = samples.shape[0]
        pad = (-n) % FRAME_SIZE
        if pad:
            samples = np.concatenate([samples, np.zeros(pad)])
        frames = samples.reshape(-1, FRAME_SIZE)
        flags = np.asarray(frame_lost, dtype=bool)
        if flags.shape[0] < frames.shape[0]:
            raise ValueError("not enough loss flags for the audio")
        chunks = [self.step(None if flags[i] else frames[i])
                  for i in range(frames.shape[0])]
        chunks.append(self.flush())
        out = np.concatenate(chunks)
        delay = self.emission_delay
        return out[delay:delay + n]

    # -- frame kinds ---------------------------------------------------------

    def _decode(self, packet):
        return self.decoder.decode_frame(packet)

    def _k(self, frame) -> np.ndarray:
        if self.mode == "codec":
            frame = self._decode(frame)
        window = np.concatenate([self.prev_frame, frame])
        features = self.stream.analyze(window)
        burg_vec = burg_features_for_frame(frame)
        self.predictor.step(features, burg_vec, False)
        vocoder.update_with_known(
            self.voc, np.concatenate([self.prev_frame[HALF:], frame[:HALF]]),
            features=features)
        self.prev_frame = frame
        self.frames_lost = 0
        if self.mode == "noncausal":
            out = np.concatenate([self.tail, frame[:HALF]])
            self.tail = frame[HALF:].copy()
            return out
        return frame.copy()

    def _u0(self, _none) -> np.ndarray:
        self._burst = BurstRecord()
        self.frames_lost = 1
        self._burst.lost_frames = 1
        self._burst.missing_burg += 1
        self.stats.missing_burg += 1
        # complete the vocoder memory up to the loss boundary
        vocoder.update_with_known(self.voc, self.prev_frame[HALF:])
        p1 = self.predictor.step(None, None, True)
        p2 = self.predictor.step(None, None, True)
        self.stats.consumed_predictions += 2
        self._burst.consumed_predictions += 2
        synth = np.concatenate([
            vocoder.synthesize(self.voc, apply_burst_fade(p1, 1), HALF),
            vocoder.synthesize(self.voc, apply_burst_fade(p2, 1), HALF)])
        self.pending = p2
        self.prev_frame = synth
        return self._emit_concealed(synth)

    def _u(self, _none) -> np.ndarray:
        self.frames_lost += 1
        self._burst.lost_frames += 1
        self._burst.missing_burg += 1
        self.stats.missing_burg += 1
        p_new = self.predictor.step(None, None, True)
        self.stats.consumed_predictions += 1
        self._burst.consumed_predictions += 1
        synth = np.concatenate([
            vocoder.synthesize(self.voc, apply_burst_fade(self.pending, self.frames_lost), HALF),
            vocoder.synthesize(self.voc, apply_burst_fade(p_new, self.frames_lost), HALF)])
        self.pending = p_new
        self.prev_frame = synth
        return self._emit_concealed(synth)

    def _emit_concealed(self, synth: np.ndarray) -> np.ndarray:
        if self.mode == "codec":
            self.decoder.conceal_frame(synth)
            return synth
        if self.mode == "noncausal":
            out = np.concatenate([self.tail, synth[:HALF]])
            self.tail = synth[HALF:].copy()
            return out
        return synth

    def _k0(self, frame) -> np.ndarray:
        if self.mode == "codec":
            frame = self._decode(frame)
        burg_vec = burg_features_for_frame(frame)
        p_ref = self.predictor.step(None, burg_vec, True)
        self.stats.refresh_predictions += 1
        self._burst.refresh_predictions += 1
        feats = self.stream.analyze(np.concatenate([self.prev_frame, frame]))

        if self.mode == "causal":
            synth = vocoder.synthesize(
                self.voc, apply_burst_fade(p_ref, self.frames_lost), HALF)
            head = vocoder.cross_fade(synth, frame[:HALF])
            self.stats.cross_fades += 1
            out = np.concatenate([head, frame[HALF:]])
        elif self.mode == "noncausal":
            backward = vocoder.extrapolate_backward(frame, feats, self.voc.rng)
            blended = vocoder.cross_fade(self.tail, backward)
            self.stats.cross_fades += 1
            out = np.concatenate([blended, frame[:HALF]])
            self.tail = frame[HALF:].copy()
        else:
            out = frame.copy()

        vocoder.update_with_known(self.voc, frame[:HALF], features=feats)
        self.pending = None
        self.prev_frame = frame
        self.frames_lost = 0
        self.stats.bursts.append(self._burst)
        self._burst = None
        return out
