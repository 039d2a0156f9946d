"""Recurrent feature predictor and its training machinery.

The network maps a per-frame input (20 acoustic features, 36 half-frame
all-pole cepstra, one lost flag) to a predicted feature vector:

    input 57 -> dense 256 (tanh) -> GRU 512 -> GRU 512 -> dense 20

During loss the acoustic features are zeroed and the flag is raised, so
the recurrent state has to carry the signal description forward.  All
forward and backward passes are written out explicitly here; training is
truncated backpropagation through time with Adam on the perceptual loss
(cepstral + band + asymmetric-band terms, heavily weighted small pitch
errors, under-estimation-averse correlation term).

Losses take predicted/true values in their physical units (cepstra as
produced by the front end, pitch period in samples, correlation in
[0, 1]).  At the network boundary the pitch period is normalized as
(period - 100) / 60.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .dsp import FeatureVector

INPUT_DIM = 57          # 20 features + 36 half-frame cepstra + lost flag
FEATURE_DIM = 20
BURG_DIM = 36
FC_DIM = 256
GRU_DIM = 512
OUTPUT_DIM = 20

PITCH_CENTER = 100.0
PITCH_SCALE = 60.0

# loss mixing weights and shape constants
LAMBDA_PITCH = 0.01
LAMBDA_CORR = 1.0
PITCH_HINGE_WIDE = 50.0
PITCH_HINGE_NARROW = 20.0
PITCH_WEIGHT_WIDE = 20.0
PITCH_WEIGHT_NARROW = 160.0
CORR_UNDERSHOOT_WEIGHT = 2.0
VOICED_THRESHOLD = 0.5

# long-burst fade: hold for 10 frames (100 ms), then walk c0 down by the
# natural-log equivalent of 5 dB per 10 ms frame (60 dB over 120 ms)
BURST_FADE_START = 10
BURST_FADE_PER_FRAME = 5.0 * np.log(10.0) / 10.0

WEIGHT_MAGIC = b"PLCW1"

# (name, rows, cols or None, fan_in) in serialization order
LAYER_DEFS = (
    ("fc_in.w", FC_DIM, INPUT_DIM, INPUT_DIM),
    ("fc_in.b", FC_DIM, None, INPUT_DIM),
    ("gru1.wx", 3 * GRU_DIM, FC_DIM, FC_DIM),
    ("gru1.wh", 3 * GRU_DIM, GRU_DIM, GRU_DIM),
    ("gru1.b", 3 * GRU_DIM, None, GRU_DIM),
    ("gru2.wx", 3 * GRU_DIM, GRU_DIM, GRU_DIM),
    ("gru2.wh", 3 * GRU_DIM, GRU_DIM, GRU_DIM),
    ("gru2.b", 3 * GRU_DIM, None, GRU_DIM),
    ("fc_out.w", OUTPUT_DIM, GRU_DIM, GRU_DIM),
    ("fc_out.b", OUTPUT_DIM, None, GRU_DIM),
)


class FormatError(Exception):
    """Malformed file or packet (CLI exit code 2)."""


class TrainingDiverged(Exception):
    """Loss became non-finite during training (CLI exit code 3)."""


def init_weights(seed: int, dtype=np.float32) -> dict:
    """Fresh weights: matrices uniform in +-1/sqrt(fan_in), biases zero.

    Exception: the recurrent update-gate biases start at +1 so new cells
    default to keeping their state.  Gates initialized near 0.5 halve the
    state every step, which makes carrying the last received features
    across a loss burst needlessly slow to learn.
    """
    rng = np.random.default_rng(seed)
    w = {}
    for name, rows, cols, fan_in in LAYER_DEFS:
        bound = 1.0 / np.sqrt(fan_in)
        if cols is None:
            w[name] = np.zeros(rows, dtype=dtype)
            if name.startswith("gru"):
                h = rows // 3
                w[name][h:2 * h] = 1.0
        else:
            w[name] = rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)
    return w


def warm_start_output_bias(weights: dict, dataset) -> None:
    """Set the output bias to the dataset's mean feature vector, in place.

    With robust (L1-family) losses the optimizer moves each bias at a
    roughly constant rate per step, so learning the large negative mean
    of the first cepstral coefficient from zero wastes most of a short
    training run.  Starting the bias at the mean removes that transient;
    matrix weights keep their usual uniform initialization.
    """
    total = np.zeros(FEATURE_DIM)
    count = 0
    for seq in dataset:
        total += seq.features.sum(axis=0)
        count += len(seq)
    if count == 0:
        raise ValueError("empty dataset")
    weights["fc_out.b"] = (total / count).astype(weights["fc_out.b"].dtype)


def save_weights(path, weights: dict) -> None:
    """Serialize weights: magic, one-line JSON header, raw little-endian f32."""
    layers = []
    offset = 0
    blobs = []
    for name, rows, cols, _ in LAYER_DEFS:
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        shape = [rows] if cols is None else [rows, cols]
        if list(arr.shape) != shape:
            raise FormatError(f"layer {name} has shape {arr.shape}, expected {shape}")
        layers.append({"name": name, "shape": shape, "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"dtype": "f32", "layers": layers}).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC + header + b"\n" + b"".join(blobs))


def load_weights(path) -> dict:
    """Parse and validate a weight file; returns float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(WEIGHT_MAGIC):
        raise FormatError("bad magic; not a predictor weight file")
    try:
        end = blob.index(b"\n", len(WEIGHT_MAGIC))
        header = json.loads(blob[len(WEIGHT_MAGIC):end].decode("ascii"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable weight header: {exc}") from exc
    if header.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    expected = {name: ([rows] if cols is None else [rows, cols])
                for name, rows, cols, _ in LAYER_DEFS}
    data = blob[end + 1:]
    weights = {}
    for layer in header.get("layers", []):
        name, shape, offset = layer["name"], layer["shape"], layer["offset"]
        if name not in expected or shape != expected[name]:
            raise FormatError(f"unexpected layer {name} {shape}")
        count = int(np.prod(shape))
        raw = data[offset:offset + 4 * count]
        if len(raw) != 4 * count:
            raise FormatError(f"truncated data for layer {name}")
        weights[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    missing = set(expected) - set(weights)
    if missing:
        raise FormatError(f"missing layers: {sorted(missing)}")
    return weights


def normalize_features(features: FeatureVector) -> np.ndarray:
    """FeatureVector to the 20-value network representation."""
    out = np.empty(FEATURE_DIM)
    out[:18] = features.cepstrum
    out[18] = (features.pitch_period - PITCH_CENTER) / PITCH_SCALE
    out[19] = features.pitch_corr
    return out


def denormalize_features(vec: np.ndarray) -> FeatureVector:
    """Network output to a valid FeatureVector (pitch and corr clamped)."""
    period = PITCH_CENTER + PITCH_SCALE * float(vec[18])
    return FeatureVector(
        cepstrum=np.asarray(vec[:18], dtype=np.float64).copy(),
        pitch_period=float(np.clip(period, dsp.PITCH_MIN, dsp.PITCH_MAX)),
        pitch_corr=float(np.clip(vec[19], 0.0, 1.0)),
    )


def build_input(features: FeatureVector | None,
                burg_vec: np.ndarray | None,
                lost: bool,
                dtype=np.float32) -> np.ndarray:
    """Assemble one 57-value network input; lost frames carry zero features."""
    x = np.zeros(INPUT_DIM, dtype=np.float64)
    if features is not None:
        if lost:
            raise ValueError("lost frames must not carry acoustic features")
        x[:FEATURE_DIM] = normalize_features(features)
    if burg_vec is not None:
        x[FEATURE_DIM:FEATURE_DIM + BURG_DIM] = burg_vec
    x[-1] = 1.0 if lost else 0.0
    return x.astype(dtype)


# ---------------------------------------------------------------------------
# losses


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def loss_spectral(pred_cepstrum, true_cepstrum, voiced: bool) -> float:
    """Cepstral + band-domain error with an overshoot penalty when voiced.

    Sum over coefficients of |dc| plus |db| plus, for voiced frames, an
    extra max(db, 0) where db is the band-domain image of the cepstral
    error.  Penalizing positive db discourages predicting more energy
    than the target in any band of a voiced frame.
    """
    dc = np.asarray(pred_cepstrum, dtype=np.float64) - np.asarray(true_cepstrum, dtype=np.float64)
    if dc.shape != (dsp.NB_BANDS,):
        raise ValueError(f"expected {dsp.NB_BANDS} cepstra, got {dc.shape}")
    db = dsp.DCT_MATRIX.T @ dc
    loss = np.sum(np.abs(dc)) + np.sum(np.abs(db))
    if voiced:
        loss += np.sum(np.maximum(db, 0.0))
    return float(loss)


def loss_pitch(pred_period: float, true_period: float) -> float:
    """Pitch-period error with saturating emphasis on small deviations."""
    dp = abs(float(pred_period) - float(true_period))
    return (dp
            + PITCH_WEIGHT_WIDE * min(dp, PITCH_HINGE_WIDE)
            + PITCH_WEIGHT_NARROW * min(dp, PITCH_HINGE_NARROW))


def loss_corr(pred_corr: float, true_corr: float) -> float:
    """Correlation error; undershoot costs three to one."""
    dr = float(pred_corr) - float(true_corr)
    return abs(dr) + CORR_UNDERSHOOT_WEIGHT * max(-dr, 0.0)


def frame_loss(pred: FeatureVector, truth: FeatureVector) -> float:
    """Combined per-frame loss; voicing decided by the true correlation."""
    voiced = truth.pitch_corr > VOICED_THRESHOLD
    return (loss_spectral(pred.cepstrum, truth.cepstrum, voiced)
            + LAMBDA_PITCH * loss_pitch(pred.pitch_period, truth.pitch_period)
            + LAMBDA_CORR * loss_corr(pred.pitch_corr, truth.pitch_corr))


def total_loss(predicted, truth, lost) -> float:
    """Mean combined loss over the lost positions of aligned sequences.

    predicted, truth: sequences of FeatureVector of equal length.
    lost: boolean mask, True where the frame was lost.  Received
    positions contribute nothing.  Returns 0.0 when nothing was lost.
    """
    predicted = list(predicted)
    truth = list(truth)
    lost = list(lost)
    if not truth:
        raise ValueError("empty sequence")
    if not (len(predicted) == len(truth) == len(lost)):
        raise ValueError("sequence lengths differ")
    vals = [frame_loss(p, t) for p, t, flag in zip(predicted, truth, lost) if flag]
    if not vals:
        return 0.0
    return float(np.mean(vals))


def apply_burst_fade(features: FeatureVector, frames_lost_so_far: int) -> FeatureVector:
    """Attenuate predicted energy on long bursts.

    No-op for the first 10 lost frames (100 ms); afterwards the first
    cepstral coefficient drops by 5 dB worth of natural log per
    additional frame, reaching -60 dB after 120 ms of fading.
    """
    if frames_lost_so_far <= BURST_FADE_START:
        return features
    fade = BURST_FADE_PER_FRAME * (frames_lost_so_far - BURST_FADE_START)
    cep = features.cepstrum.copy()
    cep[0] -= fade
    return FeatureVector(cep, features.pitch_period, features.pitch_corr)


def _loss_and_grad_norm(y: np.ndarray, t: np.ndarray, voiced: np.ndarray):
    """Loss sum and gradient for normalized (B, 20) predictions/targets.

    Piecewise-linear terms take subgradient 0 exactly at their kinks.
    Returns (sum_of_losses, dL/dy).
    """
    dc = y[:, :18] - t[:, :18]
    db = dc @ dsp.DCT_MATRIX
    alpha = voiced.astype(np.float64)[:, None]
    l_spec = (np.abs(dc).sum(axis=1) + np.abs(db).sum(axis=1)
              + (alpha[:, 0]) * np.maximum(db, 0.0).sum(axis=1))
    g_db = np.sign(db) + alpha * (db > 0.0)
    g_dc = np.sign(dc) + g_db @ dsp.DCT_MATRIX.T

    dp = PITCH_SCALE * (y[:, 18] - t[:, 18])
    adp = np.abs(dp)
    l_pitch = (adp + PITCH_WEIGHT_WIDE * np.minimum(adp, PITCH_HINGE_WIDE)
               + PITCH_WEIGHT_NARROW * np.minimum(adp, PITCH_HINGE_NARROW))
    g_dp = np.sign(dp) * (1.0
                          + PITCH_WEIGHT_WIDE * (adp < PITCH_HINGE_WIDE)
                          + PITCH_WEIGHT_NARROW * (adp < PITCH_HINGE_NARROW))

    dr = y[:, 19] - t[:, 19]
    l_corr = np.abs(dr) + CORR_UNDERSHOOT_WEIGHT * np.maximum(-dr, 0.0)
    g_dr = np.sign(dr) - CORR_UNDERSHOOT_WEIGHT * (dr < 0.0)

    total = l_spec + LAMBDA_PITCH * l_pitch + LAMBDA_CORR * l_corr
    grad = np.zeros_like(y)
    grad[:, :18] = g_dc
    grad[:, 18] = LAMBDA_PITCH * g_dp * PITCH_SCALE
    grad[:, 19] = LAMBDA_CORR * g_dr
    return float(total.sum()), grad


def _squared_loss_and_grad(y: np.ndarray, t: np.ndarray, voiced: np.ndarray):
    """Smooth surrogate used to validate the backward pass end to end."""
    d = y - t
    return float(np.sum(d * d)), 2.0 * d


# ---------------------------------------------------------------------------
# network forward / backward


def _gru_forward(wx, wh, b, v, h):
    """One GRU step; returns (h_new, cache). Gate order: reset, update, cand."""
    H = h.shape[-1]
    gx = v @ wx.T + b
    rz = _sigmoid(gx[..., :2 * H] + h @ wh[:2 * H].T)
    r = rz[..., :H]
    z = rz[..., H:2 * H]
    g = r * h
    n = np.tanh(gx[..., 2 * H:] + g @ wh[2 * H:].T)
    h_new = (1.0 - z) * n + z * h
    return h_new, (v, h, r, z, n, g)


def _gru_backward(wx, wh, dh_new, cache, grads, prefix):
    """Backprop one GRU step; returns (dv, dh_prev)."""
    v, h, r, z, n, g = cache
    H = h.shape[-1]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z

    da_n = dn * (1.0 - n * n)
    grads[prefix + ".wx"][2 * H:] += da_n.T @ v
    grads[prefix + ".wh"][2 * H:] += da_n.T @ g
    grads[prefix + ".b"][2 * H:] += da_n.sum(axis=0)
    dg = da_n @ wh[2 * H:]
    dv = da_n @ wx[2 * H:]
    dr = dg * h
    dh += dg * r

    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    da_rz = np.concatenate([da_r, da_z], axis=-1)
    grads[prefix + ".wx"][:2 * H] += da_rz.T @ v
    grads[prefix + ".wh"][:2 * H] += da_rz.T @ h
    grads[prefix + ".b"][:2 * H] += da_rz.sum(axis=0)
    dv += da_rz @ wx[:2 * H]
    dh += da_rz @ wh[:2 * H]
    return dv, dh


def forward_sequence(w, xs, h1=None, h2=None, keep_cache=False):
    """Run the network over xs with shape (T, B, 57).

    Returns (ys, h1, h2, caches): ys has shape (T, B, 20); caches is None
    unless keep_cache, otherwise a list usable by backward_sequence.
    """
    T, B, _ = xs.shape
    dtype = w["fc_in.w"].dtype
    if h1 is None:
        h1 = np.zeros((B, GRU_DIM), dtype=dtype)
    if h2 is None:
        h2 = np.zeros((B, GRU_DIM), dtype=dtype)
    ys = np.empty((T, B, OUTPUT_DIM), dtype=dtype)
    caches = [] if keep_cache else None
    for tt in range(T):
        x = xs[tt]
        u = np.tanh(x @ w["fc_in.w"].T + w["fc_in.b"])
        h1, c1 = _gru_forward(w["gru1.wx"], w["gru1.wh"], w["gru1.b"], u, h1)
        h2, c2 = _gru_forward(w["gru2.wx"], w["gru2.wh"], w["gru2.b"], h1, h2)
        ys[tt] = h2 @ w["fc_out.w"].T + w["fc_out.b"]
        if keep_cache:
            caches.append((x, u, c1, c2, h2))
    return ys, h1, h2, caches


def backward_sequence(w, caches, dys):
    """Accumulate weight gradients for a cached forward pass.

    dys: (T, B, 20) loss gradient at each output.  State gradients at
    the sequence start are discarded (truncated backprop).  Arithmetic
    follows the weight dtype: f32 weights get an f32 backward pass.
    """
    dtype = w["fc_in.w"].dtype
    grads = {name: np.zeros_like(w[name]) for name in w}
    T = len(caches)
    B = dys.shape[1]
    dys = np.asarray(dys, dtype=dtype)
    dh1 = np.zeros((B, GRU_DIM), dtype=dtype)
    dh2 = np.zeros((B, GRU_DIM), dtype=dtype)
    for tt in range(T - 1, -1, -1):
        x, u, c1, c2, h2 = caches[tt]
        dy = dys[tt]
        grads["fc_out.w"] += dy.T @ h2
        grads["fc_out.b"] += dy.sum(axis=0)
        dh2 = dh2 + dy @ w["fc_out.w"]
        dh1_in, dh2 = _gru_backward(w["gru2.wx"], w["gru2.wh"], dh2, c2, grads, "gru2")
        dh1 = dh1 + dh1_in
        du, dh1 = _gru_backward(w["gru1.wx"], w["gru1.wh"], dh1, c1, grads, "gru1")
        da_u = du * (1.0 - u * u)
        grads["fc_in.w"] += da_u.T @ x
        grads["fc_in.b"] += da_u.sum(axis=0)
    return grads


@dataclass
class Predictor:
    """Streaming wrapper: weights plus the recurrent state of one stream."""

    weights: dict
    h1: np.ndarray = field(default=None)
    h2: np.ndarray = field(default=None)

    def __post_init__(self):
        dtype = self.weights["fc_in.w"].dtype
        if self.h1 is None:
            self.h1 = np.zeros(GRU_DIM, dtype=dtype)
        if self.h2 is None:
            self.h2 = np.zeros(GRU_DIM, dtype=dtype)

    def step(self, features: FeatureVector | None, burg_vec, lost: bool) -> FeatureVector:
        """Advance one frame and return the predicted feature vector."""
        w = self.weights
        x = build_input(features, burg_vec, lost, dtype=w["fc_in.w"].dtype)
        u = np.tanh(w["fc_in.w"] @ x + w["fc_in.b"])
        self.h1, _ = _gru_forward(w["gru1.wx"], w["gru1.wh"], w["gru1.b"], u, self.h1)
        self.h2, _ = _gru_forward(w["gru2.wx"], w["gru2.wh"], w["gru2.b"], self.h1, self.h2)
        y = w["fc_out.w"] @ self.h2 + w["fc_out.b"]
        return denormalize_features(np.asarray(y, dtype=np.float64))

    def reset(self):
        self.h1 = np.zeros_like(self.h1)
        self.h2 = np.zeros_like(self.h2)


# ---------------------------------------------------------------------------
# step plans: how predictions line up with frames around a burst


RECV, LOST, REFRESH = 0, 1, 2


def step_plan(lost_flags) -> list:
    """Expand per-frame loss flags into network steps.

    Each step is (kind, frame_index, target_index); target_index is the
    feature slot the step predicts (-1 when the output is unused).
    A burst of k lost frames needs k+1 predictions: two on its first
    frame, one on each later lost frame.  The first received frame after
    a burst re-predicts the last slot from half-frame evidence.
    """
    lost_flags = list(lost_flags)
    n = len(lost_flags)
    steps = []
    prev_lost = False
    for i, flag in enumerate(lost_flags):
        if flag and not prev_lost:
            steps.append((LOST, i, i))
            steps.append((LOST, i, i + 1 if i + 1 < n else -1))
        elif flag:
            steps.append((LOST, i, i + 1 if i + 1 < n else -1))
        elif prev_lost:
            steps.append((REFRESH, i, i))
        else:
            steps.append((RECV, i, -1))
        prev_lost = bool(flag)
    return steps


def burst_lengths(lost_flags) -> list:
    """Lengths of maximal runs of lost frames."""
    runs, count = [], 0
    for flag in lost_flags:
        if flag:
            count += 1
        elif count:
            runs.append(count)
            count = 0
    if count:
        runs.append(count)
    return runs


# ---------------------------------------------------------------------------
# training


@dataclass
class FeatureSequence:
    """Ground-truth per-frame data for one utterance.

    features: (N, 20) normalized network representation
    burg: (N, 36) half-frame cepstra
    """

    features: np.ndarray
    burg: np.ndarray

    def __len__(self):
        return self.features.shape[0]


def sequence_from_arrays(cepstra, pitch, corr, burg_vecs) -> FeatureSequence:
    n = len(pitch)
    feats = np.empty((n, FEATURE_DIM))
    feats[:, :18] = cepstra
    feats[:, 18] = (np.asarray(pitch) - PITCH_CENTER) / PITCH_SCALE
    feats[:, 19] = corr
    return FeatureSequence(features=feats, burg=np.asarray(burg_vecs, dtype=np.float64))


def extract_sequence(samples: np.ndarray) -> FeatureSequence:
    """Per-frame training features of an utterance, engine-aligned.

    Frame i's feature vector comes from the window covering frames
    i-1 and i (the first frame sees zeros before it), its half-frame
    all-pole cepstra from frame i alone — the same alignment the engine
    feeds the network during streaming.
    """
    from .burg import burg_features_for_frame

    samples = np.asarray(samples, dtype=np.float64)
    pad = (-samples.shape[0]) % dsp.FRAME_SIZE
    if pad:
        samples = np.concatenate([samples, np.zeros(pad)])
    frames = samples.reshape(-1, dsp.FRAME_SIZE)
    stream = dsp.FeatureStream()
    prev = np.zeros(dsp.FRAME_SIZE)
    cepstra, pitch, corr, burg_vecs = [], [], [], []
    for frame in frames:
        fv = stream.analyze(np.concatenate([prev, frame]))
        cepstra.append(fv.cepstrum)
        pitch.append(fv.pitch_period)
        corr.append(fv.pitch_corr)
        burg_vecs.append(burg_features_for_frame(frame))
        prev = frame
    return sequence_from_arrays(np.array(cepstra), np.array(pitch),
                                np.array(corr), np.array(burg_vecs))


def _window_batch(picks, window, rng, p_enter, p_exit, dtype):
    """Assemble one TBPTT batch.

    picks: list of (sequence, start-frame) pairs.  Returns xs (T, B, 57),
    targets (T, B, 20), voiced (T, B), mask (T, B).  Plans longer than
    the window (extra first-loss steps) are cut to keep columns aligned.
    """
    from .traces import gilbert_elliott

    B = len(picks)
    T = window
    xs = np.zeros((T, B, INPUT_DIM), dtype=dtype)
    targets = np.zeros((T, B, FEATURE_DIM))
    voiced = np.zeros((T, B), dtype=bool)
    mask = np.zeros((T, B), dtype=bool)
    for col, (seq, start) in enumerate(picks):
        n_packets = (window + 3) // 2 + 1
        packets = gilbert_elliott(n_packets, p_enter, p_exit,
                                  int(rng.integers(0, 2 ** 31)))
        flags = np.repeat(packets, 2)[:window]
        plan = step_plan(flags)[:window]
        for row, (kind, fi, ti) in enumerate(plan):
            idx = start + fi
            if kind == RECV:
                xs[row, col, :FEATURE_DIM] = seq.features[idx]
                xs[row, col, FEATURE_DIM:FEATURE_DIM + BURG_DIM] = seq.burg[idx]
            elif kind == REFRESH:
                xs[row, col, FEATURE_DIM:FEATURE_DIM + BURG_DIM] = seq.burg[idx]
                xs[row, col, -1] = 1.0
            else:
                xs[row, col, -1] = 1.0
            if kind != RECV and ti >= 0 and start + ti < len(seq):
                tgt = start + ti
                targets[row, col] = seq.features[tgt]
                voiced[row, col] = seq.features[tgt, 19] > VOICED_THRESHOLD
                mask[row, col] = True
    return xs, targets, voiced, mask


def _masked_loss_grad(ys, targets, voiced, mask, loss_fn):
    """Apply loss_fn at masked steps; returns (mean loss, dys, count)."""
    T, B, _ = ys.shape
    dys = np.zeros((T, B, OUTPUT_DIM))
    count = int(mask.sum())
    if count == 0:
        return 0.0, dys, 0
    total = 0.0
    for tt in range(T):
        rows = np.flatnonzero(mask[tt])
        if rows.size == 0:
            continue
        val, grad = loss_fn(np.asarray(ys[tt, rows], dtype=np.float64),
                            targets[tt, rows], voiced[tt, rows])
        total += val
        dys[tt, rows] = grad
    return total / count, dys / count, count


class _Adam:
    def __init__(self, weights, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in weights.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, weights, grads, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k in weights:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            upd = lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            weights[k] = (weights[k].astype(np.float64) - upd).astype(weights[k].dtype)


def evaluate_sequences(weights, seqs, trace_flags) -> tuple:
    """Mean perceptual loss of the network and of feature freezing.

    trace_flags: per-sequence boolean frame-loss arrays.  Returns
    (network_loss, freeze_loss), both means over supervised steps.
    """
    dtype = weights["fc_in.w"].dtype
    net_sum, frz_sum, count = 0.0, 0.0, 0
    for seq, flags in zip(seqs, trace_flags):
        flags = np.asarray(flags[:len(seq)], dtype=bool)
        plan = step_plan(flags)
        xs = np.zeros((len(plan), 1, INPUT_DIM), dtype=dtype)
        targets = np.zeros((len(plan), 1, FEATURE_DIM))
        voiced = np.zeros((len(plan), 1), dtype=bool)
        mask = np.zeros((len(plan), 1), dtype=bool)
        freeze = np.zeros((len(plan), FEATURE_DIM))
        last_known = np.zeros(FEATURE_DIM)
        for row, (kind, fi, ti) in enumerate(plan):
            if kind == RECV:
                xs[row, 0, :FEATURE_DIM] = seq.features[fi]
                xs[row, 0, FEATURE_DIM:FEATURE_DIM + BURG_DIM] = seq.burg[fi]
                last_known = seq.features[fi]
            elif kind == REFRESH:
                xs[row, 0, FEATURE_DIM:FEATURE_DIM + BURG_DIM] = seq.burg[fi]
                xs[row, 0, -1] = 1.0
            else:
                xs[row, 0, -1] = 1.0
            if kind != RECV and 0 <= ti < len(seq):
                targets[row, 0] = seq.features[ti]
                voiced[row, 0] = seq.features[ti, 19] > VOICED_THRESHOLD
                mask[row, 0] = True
                freeze[row] = last_known
        ys, _, _, _ = forward_sequence(weights, xs)
        for row in range(len(plan)):
            if not mask[row, 0]:
                continue
            val, _ = _loss_and_grad_norm(np.asarray(ys[row], dtype=np.float64),
                                         targets[row], voiced[row])
            net_sum += val
            fval, _ = _loss_and_grad_norm(freeze[row:row + 1],
                                          targets[row], voiced[row])
            frz_sum += fval
            count += 1
    if count == 0:
        return 0.0, 0.0
    return net_sum / count, frz_sum / count


def train(weights, dataset, *, epochs, seed, lr=1e-3, batch_size=16, window=48,
          p_enter=0.05, p_exit=0.45, average_from=None, holdout=None, log=None):
    """Truncated backprop through time with Adam on the perceptual loss.

    dataset: list of FeatureSequence (each at least 50 frames).
    lr: float or callable epoch -> learning rate.
    average_from: if set, the returned weights are the mean of the
    end-of-epoch snapshots from that epoch on (tail averaging smooths
    out the step-size dither the robust losses cause near convergence).
    holdout: optional list of FeatureSequence for progress reporting.
    Returns a history list of per-epoch mean training losses.  Raises
    TrainingDiverged if the loss stops being finite.
    """
    for seq in dataset:
        if len(seq) < 50:
            raise ValueError("training sequences must have at least 50 frames")
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    adam = _Adam(weights)
    dtype = weights["fc_in.w"].dtype
    lr_fn = lr if callable(lr) else (lambda _e: lr)
    history = []
    avg_sum, avg_n = None, 0
    batches = max(1, sum(max(1, len(s) // window) for s in dataset) // batch_size)
    for epoch in range(epochs):
        epoch_lr = float(lr_fn(epoch))
        epoch_loss, epoch_count = 0.0, 0
        for _batch in range(batches):
            picks = []
            for _ in range(batch_size):
                seq = dataset[int(rng.integers(0, len(dataset)))]
                hi = max(1, len(seq) - window - 2)
                picks.append((seq, int(rng.integers(0, hi))))
            xs, targets, voiced, mask = _window_batch(
                picks, window, rng, p_enter, p_exit, dtype)
            ys, _, _, caches = forward_sequence(weights, xs, keep_cache=True)
            loss, dys, count = _masked_loss_grad(ys, targets, voiced, mask,
                                                 _loss_and_grad_norm)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss {loss} at epoch {epoch}")
            if count and epoch_lr > 0.0:
                grads = backward_sequence(weights, caches, dys)
                adam.step(weights, grads, epoch_lr)
            epoch_loss += loss * count
            epoch_count += count
        mean_loss = epoch_loss / max(epoch_count, 1)
        history.append(mean_loss)
        if average_from is not None and epoch >= average_from:
            if avg_sum is None:
                avg_sum = {k: np.asarray(v, dtype=np.float64).copy()
                           for k, v in weights.items()}
            else:
                for k, v in weights.items():
                    avg_sum[k] += v
            avg_n += 1
        if log is not None:
            log(epoch, mean_loss)
    if avg_n:
        for k in weights:
            weights[k] = (avg_sum[k] / avg_n).astype(weights[k].dtype)
    return history


def gradient_check(weights, *, seed=0, n_params=200, eps=1e-4, loss="perceptual",
                   steps=12, batch=2, kink_margin=1e-2, min_grad=1e-3):
    """Compare hand-derived gradients against central differences.

    Builds a random batch (seeded), masks out supervised steps whose loss
    terms sit within kink_margin of a non-smooth point, then checks
    n_params randomly chosen weights with |analytic| >= min_grad (the
    floor keeps f64 round-off in the numerator from dominating).
    Returns the maximum relative error.
    """
    rng = np.random.default_rng(seed)
    w64 = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    xs = rng.normal(0.0, 1.0, size=(steps, batch, INPUT_DIM))
    xs[..., -1] = (xs[..., -1] > 0.0).astype(np.float64)
    targets = rng.normal(0.0, 1.0, size=(steps, batch, FEATURE_DIM))
    voiced = rng.random((steps, batch)) > 0.5
    mask = rng.random((steps, batch)) > 0.3
    loss_fn = _loss_and_grad_norm if loss == "perceptual" else _squared_loss_and_grad

    if loss == "perceptual":
        ys, _, _, _ = forward_sequence(w64, xs)
        for tt in range(steps):
            for bb in range(batch):
                if not mask[tt, bb]:
                    continue
                dc = ys[tt, bb, :18] - targets[tt, bb, :18]
                db = dsp.DCT_MATRIX.T @ dc
                dp = abs(PITCH_SCALE * (ys[tt, bb, 18] - targets[tt, bb, 18]))
                dr = ys[tt, bb, 19] - targets[tt, bb, 19]
                margins = np.concatenate([
                    np.abs(dc), np.abs(db),
                    [dp, abs(dp - PITCH_HINGE_WIDE), abs(dp - PITCH_HINGE_NARROW),
                     abs(dr)],
                ])
                if margins.min() < kink_margin:
                    mask[tt, bb] = False

    def run(wd):
        ys_, _, _, caches = forward_sequence(wd, xs, keep_cache=True)
        val, dys, _ = _masked_loss_grad(ys_, targets, voiced, mask, loss_fn)
        return val, caches, dys

    base, caches, dys = run(w64)
    grads = backward_sequence(w64, caches, dys)

    names = [name for name, *_ in LAYER_DEFS]
    max_rel = 0.0
    checked = 0
    attempts = 0
    while checked < n_params and attempts < n_params * 50:
        attempts += 1
        name = names[int(rng.integers(0, len(names)))]
        flat = int(rng.integers(0, w64[name].size))
        ga = float(grads[name].flat[flat])
        if abs(ga) < min_grad:
            continue
        orig = w64[name].flat[flat]
        w64[name].flat[flat] = orig + eps
        up, _, _ = run(w64)
        w64[name].flat[flat] = orig - eps
        down, _, _ = run(w64)
        w64[name].flat[flat] = orig
        gn = (up - down) / (2.0 * eps)
        rel = abs(ga - gn) / max(1e-8, abs(gn))
        max_rel = max(max_rel, rel)
        checked += 1
    if checked == 0:
        raise RuntimeError("no checkable parameters found")
    return max_rel
