"""Open-world object detection decision layer.

Classifies precomputed region features against a growable vocabulary of
text-encoded category embeddings, learns wildcard embeddings so objects
outside the vocabulary surface as explicit unknowns, and evaluates with
open-world metrics. Boxes are taken as given throughout; there is no
image backbone and no box regression here.
"""

from .assign import AssignConfig, AssignedPair, Assignment, align_metric, assign_o2m, assign_o2o, targets
from .core import UNKNOWN_ID, Anchor, BBox, Detection, GroundTruth, Scene, iou, pairwise_iou
from .data import Dataset, WorldSpec, eval_view, generate, read_features, read_scenes, training_view, write_features, write_scenes
from .embedding import (
    CategoryEntry,
    CategoryStatus,
    ScoreParams,
    Vocabulary,
    classify,
    cosine,
    normalize,
    score,
    score_matrix,
    unit_embedding,
)
from .errors import (
    ChecksumError,
    ConfigError,
    DimensionMismatchError,
    FileFormatError,
    GenerationError,
    TruncatedFileError,
    UniowError,
    VersionMismatchError,
)
from .infer import InferConfig, filter_unknown, predict, read_detections, write_detections
from .metrics import EvalConfig, EvalReport, average_precision, format_report, match, owod_report, write_report
from .textenc import (
    LoraLinear,
    ToyTextEncoder,
    base_tokens,
    encode,
    encode_grad,
    load_encoder,
    lora_forward,
    lora_merge,
    precompute_vocab,
    save_encoder,
)
from .train import (
    PseudoLabel,
    TrainConfig,
    TrainLogger,
    bce,
    calibrate,
    calibration_step_losses,
    grad_embedding,
    select_pseudo,
    tune_known,
    tune_unknown,
    tune_wildcard_obj,
)
from .worldstate import TaskState, expand, initial_state, load_state, save_state

__version__ = "0.1.0"
