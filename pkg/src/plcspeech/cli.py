"""Command-line entry points.

    plc run               conceal one WAV over a loss trace
    plc train             fit predictor weights
    plc extract-features  WAV -> per-frame feature file (.npz)
    plc gradcheck         verify analytic gradients numerically

Exit codes: 0 success, 2 malformed input (file formats, traces,
packets), 3 training divergence or failed gradient check.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluate, predictor, synthspeech, traces, wavio
from .dsp import FRAME_SIZE
from .predictor import FormatError, TrainingDiverged

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_DIVERGED = 3


def _load_trace(args, n_packets: int) -> np.ndarray:
    if args.trace:
        if args.trace.startswith("ge:"):
            try:
                p_enter, p_exit, seed = args.trace[3:].split(",")
                return traces.gilbert_elliott(n_packets, float(p_enter),
                                              float(p_exit), int(seed))
            except (ValueError, TypeError) as exc:
                raise traces.TraceFormatError(
                    f"expected ge:p_enter,p_exit,seed — {exc}") from exc
        text = Path(args.trace).read_text(encoding="ascii")
        packets = traces.parse_trace(text)
        if packets.shape[0] < n_packets:
            raise traces.TraceFormatError(
                f"trace has {packets.shape[0]} packets, audio needs {n_packets}")
        return packets[:n_packets]
    p_enter, p_exit = (float(v) for v in args.ge.split(","))
    return traces.gilbert_elliott(n_packets, p_enter, p_exit, args.seed)


def _cmd_run(args) -> int:
    audio = wavio.read_wav(args.input)
    n_frames = int(np.ceil(len(audio) / FRAME_SIZE))
    n_packets = (n_frames + 1) // 2
    packets = _load_trace(args, n_packets)
    flags = traces.frame_flags(packets)[:n_frames]

    weights = None if args.freeze else predictor.load_weights(args.weights)
    out, _stats = evaluate.conceal_utterance(weights, audio, flags,
                                             mode=args.mode, seed=args.seed)
    wavio.write_wav(args.output, out)

    report = evaluate.evaluate_set(
        weights, [audio], [packets], mode=args.mode, seed=args.seed,
        include_timing=not args.no_timing,
        include_baselines=not args.no_baselines)
    if args.report:
        evaluate.write_report(args.report, report)
    mean = report["mean"]
    line = (f"{args.mode}: {int(flags.sum())}/{n_frames} frames lost, "
            f"engine LSD {mean.get('engine_lsd', 0.0):.3f} dB")
    if not args.no_timing:
        line += f", RTF {report['realtime_factor']:.3f}"
    print(line)
    return EXIT_OK


def _load_dataset(args):
    if args.data:
        seqs = []
        for path in sorted(Path(args.data).glob("*.npz")):
            with np.load(path) as z:
                seqs.append(predictor.sequence_from_arrays(
                    z["cepstra"], z["pitch"], z["corr"], z["burg"]))
        if not seqs:
            raise FormatError(f"no .npz feature files in {args.data}")
        return seqs
    audio = synthspeech.generate_corpus(args.synthetic, base_seed=args.seed,
                                        seconds=args.seconds)
    return [predictor.extract_sequence(a) for a in audio]


def _cmd_train(args) -> int:
    dataset = _load_dataset(args)
    n_hold = max(1, len(dataset) // 10)
    holdout, train_set = dataset[:n_hold], dataset[n_hold:]
    if not train_set:
        train_set, holdout = dataset, []

    weights = predictor.init_weights(args.seed)
    predictor.warm_start_output_bias(weights, train_set)
    # staged schedule: base rate for the first ~36% of epochs, then
    # 0.3x/0.1x/0.03x; the tail (last ~18%) is averaged
    stages = [(0.36, 1.0), (0.57, 0.3), (0.82, 0.1), (1.01, 0.03)]
    lr_fn = lambda e: args.lr * next(
        s for frac, s in stages if e < frac * args.epochs)
    history = predictor.train(
        weights, train_set, epochs=args.epochs, seed=args.seed, lr=lr_fn,
        batch_size=args.batch, window=args.window,
        average_from=int(0.82 * args.epochs),
        log=lambda e, l: print(f"epoch {e:3d}  loss {l:.4f}"))
    predictor.save_weights(args.out, weights)
    print(f"saved weights to {args.out}  (final loss {history[-1]:.4f})")

    if holdout:
        rng = np.random.default_rng(args.seed + 1)
        flags = [traces.frame_flags(
            traces.gilbert_elliott((len(s) + 1) // 2 + 1, 0.05, 0.45,
                                   int(rng.integers(2 ** 31))))[:len(s)]
            for s in holdout]
        net, frz = predictor.evaluate_sequences(weights, holdout, flags)
        print(f"holdout loss {net:.4f} vs feature-freeze {frz:.4f}")
    return EXIT_OK


def _cmd_extract(args) -> int:
    audio = wavio.read_wav(args.input)
    seq = predictor.extract_sequence(audio)
    np.savez(args.output,
             cepstra=seq.features[:, :18].astype(np.float32),
             pitch=(seq.features[:, 18] * predictor.PITCH_SCALE
                    + predictor.PITCH_CENTER).astype(np.float32),
             corr=seq.features[:, 19].astype(np.float32),
             burg=seq.burg.astype(np.float32))
    print(f"{args.output}: {len(seq)} frames")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    weights = (predictor.load_weights(args.weights) if args.weights
               else predictor.init_weights(args.seed))
    rel_sq = predictor.gradient_check(weights, seed=args.seed, loss="squared",
                                      n_params=args.params, min_grad=1e-2)
    rel_pc = predictor.gradient_check(weights, seed=args.seed + 1,
                                      loss="perceptual", n_params=args.params)
    print(f"max relative error: squared {rel_sq:.3e}, perceptual {rel_pc:.3e}")
    if rel_pc >= args.tolerance or rel_sq >= args.tolerance:
        print(f"FAILED tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plc",
                                 description="packet loss concealment toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="conceal a WAV over a loss trace")
    run.add_argument("--input", required=True)
    run.add_argument("--output", required=True)
    run.add_argument("--mode", choices=("causal", "noncausal", "codec"),
                     default="causal")
    group = run.add_mutually_exclusive_group()
    group.add_argument("--trace", help="text file of 0/1 per 20 ms packet, "
                       "or inline channel spec ge:p_enter,p_exit,seed")
    group.add_argument("--ge", default="0.05,0.45",
                       help="Gilbert-Elliott p_enter,p_exit (default 0.05,0.45)")
    wgroup = run.add_mutually_exclusive_group(required=True)
    wgroup.add_argument("--weights", help="predictor weight file")
    wgroup.add_argument("--freeze", action="store_true",
                        help="use the repeat-last-features baseline predictor")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--report", help="write metrics JSON here")
    run.add_argument("--no-timing", action="store_true",
                     help="omit wall-clock fields for bit-reproducible reports")
    run.add_argument("--no-baselines", action="store_true")
    run.set_defaults(fn=_cmd_run)

    tr = sub.add_parser("train", help="train predictor weights")
    tr.add_argument("--out", required=True)
    tr.add_argument("--data", help="directory of .npz feature files")
    tr.add_argument("--synthetic", type=int, default=20,
                    help="train on N generated utterances instead")
    tr.add_argument("--seconds", type=float, default=3.0)
    tr.add_argument("--epochs", type=int, default=30)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--batch", type=int, default=16)
    tr.add_argument("--window", type=int, default=48)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(fn=_cmd_train)

    ex = sub.add_parser("extract-features", help="WAV to .npz features")
    ex.add_argument("--input", required=True)
    ex.add_argument("--output", required=True)
    ex.set_defaults(fn=_cmd_extract)

    gc = sub.add_parser("gradcheck", help="numeric gradient verification")
    gc.add_argument("--weights")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--params", type=int, default=150)
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.set_defaults(fn=_cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, traces.TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
