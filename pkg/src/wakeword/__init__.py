"""Wake-word detection with alignment-free LF-MMI, a TDNN-F acoustic model
and an online Viterbi decoder."""

__version__ = "0.1.0"

from .am import ModelConfig, StreamingScorer, TdnnfModel
from .corpus import (AugmentPolicy, Entry, Manifest, UtteranceLabel, augment, load_manifest,
                     subsegment_negatives)
from .decoder import Detection, OnlineDecoder, offline_decode
from .evaluation import DetPoint, det_sweep, evaluate, monotone_envelope
from .features import MfccConfig, MfccStream, compute_mfcc
from .fst import Wfst
from .graphs import (PhoneInventory, build_decoding_graph, build_denominator_graph, build_numerator_graph,
                     build_phone_lm, build_topology)
from .lfmmi import forward_backward, lfmmi_loss_and_grad, viterbi
from .trainer import TrainConfig, align, train, train_refine

__all__ = [
    "AugmentPolicy", "DetPoint", "Detection", "Entry", "Manifest", "MfccConfig", "MfccStream", "ModelConfig",
    "OnlineDecoder", "PhoneInventory", "StreamingScorer", "TdnnfModel", "TrainConfig", "UtteranceLabel", "Wfst",
    "align", "augment", "build_decoding_graph", "build_denominator_graph", "build_numerator_graph",
    "build_phone_lm", "build_topology", "compute_mfcc", "det_sweep", "evaluate", "forward_backward",
    "lfmmi_loss_and_grad", "load_manifest", "monotone_envelope", "offline_decode", "subsegment_negatives",
    "train", "train_refine", "viterbi",
]
