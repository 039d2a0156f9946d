"""Batch evaluation: run concealment over utterance/trace sets and report.

Reports are plain dicts serializable to JSON; all floats are rounded to
six significant digits so that reports from identical seeds compare
bit-identical.  Timing numbers are optional for the same reason: with
include_timing=False the report carries no wall-clock-dependent field.
"""

from __future__ import annotations

import concurrent.futures
import json
import os

import numpy as np

from . import baselines, codec, metrics, traces
from .dsp import FRAME_SIZE
from .engine import Engine, FreezePredictor
from .predictor import Predictor


def round_sig(x, digits: int = 6):
    """Round floats (recursively through dicts/lists) to significant digits."""
    if isinstance(x, dict):
        return {k: round_sig(v, digits) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [round_sig(v, digits) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if x == 0.0 or not np.isfinite(x):
            return x
        return float(f"{x:.{digits}g}")
    if isinstance(x, (int, np.integer)):
        return int(x)
    return x


def make_engine(weights, mode: str, seed: int, decoder=None) -> Engine:
    """Engine with either trained weights or the feature-freeze baseline."""
    pred = Predictor(weights) if isinstance(weights, dict) else weights
    if pred is None:
        pred = FreezePredictor()
    return Engine(pred, mode=mode, seed=seed, decoder=decoder)


def conceal_utterance(weights, samples: np.ndarray, frame_lost,
                      mode: str = "causal", seed: int = 0):
    """Run one utterance through the engine; returns (audio, stats)."""
    if mode == "codec":
        packets = codec.encode_stream(samples)
        eng = make_engine(weights, mode, seed, decoder=codec.Decoder())
        flags = np.asarray(frame_lost, dtype=bool)
        out = np.concatenate([
            eng.step(None if flags[i] else packets[i])
            for i in range(len(packets))])
        eng.flush()
        return out[: len(samples)], eng.stats
    eng = make_engine(weights, mode, seed)
    return eng.process(samples, frame_lost), eng.stats


def _thread_count(n_items: int) -> int:
    """Worker count for per-utterance evaluation, capped by PLC_THREADS."""
    cap = os.environ.get("PLC_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_items))


def _evaluate_one(weights, idx, audio, packets, mode, seed, include_baselines):
    n_frames = int(np.ceil(len(audio) / FRAME_SIZE))
    flags = traces.frame_flags(packets)[:n_frames]
    if flags.shape[0] < n_frames:
        flags = np.concatenate([flags, np.zeros(n_frames - flags.shape[0], bool)])
    out, stats = conceal_utterance(weights, audio, flags, mode, seed + idx)
    if mode == "codec":
        dec = codec.Decoder()
        reference = np.concatenate(
            [dec.decode_frame(p) for p in codec.encode_stream(audio)])[: len(audio)]
    else:
        reference = np.asarray(audio, dtype=np.float64)
    row = {
        "utterance": idx,
        "lost_frames": int(flags.sum()),
        "engine_lsd": metrics.log_spectral_distance(reference, out, flags),
        "engine_snr": metrics.snr_lost_regions(reference, out, flags),
        "max_jump": metrics.max_discontinuity(out),
        "boundary_jump": metrics.boundary_discontinuities(out, flags),
    }
    if include_baselines:
        zf = baselines.zero_fill(reference, flags)
        rp = baselines.repeat_conceal(reference, flags)
        row["zero_lsd"] = metrics.log_spectral_distance(reference, zf, flags)
        row["repeat_lsd"] = metrics.log_spectral_distance(reference, rp, flags)
        row["zero_snr"] = metrics.snr_lost_regions(reference, zf, flags)
        row["repeat_snr"] = metrics.snr_lost_regions(reference, rp, flags)
    return row, stats


def evaluate_set(weights, utterances, packet_traces, mode: str = "causal",
                 seed: int = 0, include_timing: bool = True,
                 include_baselines: bool = True) -> dict:
    """Concealment metrics over a set of utterances and loss traces.

    utterances: list of float audio arrays.  packet_traces: matching
    list of per-packet loss flag arrays.  In codec mode the reference
    for distances is the clean-channel decode, so the codec's own
    distortion does not count against concealment.

    Utterances are independent streams, so they are evaluated on a
    thread pool (capped by the PLC_THREADS env var) and reduced in
    input order; metric fields do not depend on the worker count.
    Timing fields are wall-clock measurements and naturally do.
    """
    jobs = list(enumerate(zip(utterances, packet_traces)))
    workers = _thread_count(len(jobs))
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda job: _evaluate_one(weights, job[0], job[1][0], job[1][1],
                                          mode, seed, include_baselines), jobs))
    else:
        results = [_evaluate_one(weights, idx, audio, packets, mode, seed,
                                 include_baselines)
                   for idx, (audio, packets) in jobs]

    per_utt = []
    agg = {"engine_lsd": [], "zero_lsd": [], "repeat_lsd": [],
           "engine_snr": [], "zero_snr": [], "repeat_snr": []}
    stats_total = None
    for row, stats in results:
        agg["engine_lsd"].append(row["engine_lsd"])
        agg["engine_snr"].append(row["engine_snr"])
        if include_baselines:
            for key in ("zero_lsd", "repeat_lsd", "zero_snr", "repeat_snr"):
                agg[key].append(row[key])
        per_utt.append(row)
        if stats_total is None:
            stats_total = stats
        else:
            for k in stats_total.frames:
                stats_total.frames[k] += stats.frames[k]
                stats_total.time_by_kind[k][0] += stats.time_by_kind[k][0]
                stats_total.time_by_kind[k][1] += stats.time_by_kind[k][1]
            stats_total.consumed_predictions += stats.consumed_predictions
            stats_total.refresh_predictions += stats.refresh_predictions
            stats_total.missing_burg += stats.missing_burg
            stats_total.cross_fades += stats.cross_fades

    report = {
        "mode": mode,
        "seed": seed,
        "utterances": len(per_utt),
        "frame_counts": dict(stats_total.frames) if stats_total else {},
        "consumed_predictions": stats_total.consumed_predictions if stats_total else 0,
        "refresh_predictions": stats_total.refresh_predictions if stats_total else 0,
        "missing_burg": stats_total.missing_burg if stats_total else 0,
        "cross_fades": stats_total.cross_fades if stats_total else 0,
        "mean": {k: (float(np.mean(v)) if v else 0.0) for k, v in agg.items()
                 if v},
        "per_utterance": per_utt,
    }
    if include_timing and stats_total:
        report["realtime_factor"] = stats_total.realtime_factor()
        report["rtf_by_kind"] = stats_total.rtf_by_kind()
    return round_sig(report)


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
