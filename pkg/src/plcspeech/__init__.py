"""Streaming packet-loss concealment for 16 kHz speech.

A recurrent feature predictor (18 Bark cepstra + pitch period + pitch
correlation per 10 ms frame) drives a conditioned all-pole synthesizer
to fill lost packets; three modes cover plain causal concealment,
5 ms-lookahead concealment with bit-exact passthrough, and concealment
feeding a stateful decoder's prediction memories.
"""

from .dsp import FeatureVector, LpcCoeffs, analyze_frame, estimate_pitch
from .engine import Engine, FreezePredictor
from .predictor import (FormatError, Predictor, TrainingDiverged,
                        init_weights, load_weights, save_weights, total_loss,
                        train)
from .traces import gilbert_elliott, parse_trace, serialize_trace
from .vocoder import VocoderState, synthesize

__version__ = "0.1.0"
__all__ = [
    "FeatureVector", "LpcCoeffs", "analyze_frame", "estimate_pitch",
    "Engine", "FreezePredictor",
    "FormatError", "Predictor", "TrainingDiverged",
    "init_weights", "load_weights", "save_weights", "total_loss", "train",
    "gilbert_elliott", "parse_trace", "serialize_trace",
    "VocoderState", "synthesize",
    "__version__",
]
