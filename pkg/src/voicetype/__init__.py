"""Voice type classification: KCHI / OCH / MAL / FEM / SPEECH frame scores from raw audio."""

from .annotations import (
    OUTPUT_CLASSES,
    REFERENCE_CLASSES,
    Annotation,
    FrameGrid,
    LabelMatrix,
    Segment,
    VoiceClass,
    decode_frames,
    derive_speech,
    encode_frames,
    parse_rttm,
    serialize_rttm,
)
from .evaluation import detection_counts, evaluate, f_measure, tune
from .inference import SlidingSpec, Thresholds, binarize, slide_scores
from .model import Checkpoint, ModelConfig, ScoreTrack, VoiceTypeClassifier
from .training import TrainConfig, bce_loss, cyclical_lr, train, train_binary_suite

__version__ = "0.1.0"
