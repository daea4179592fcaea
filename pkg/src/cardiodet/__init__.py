"""Multi-task spatio-temporal detection of a circular cardiac target in
ultrasound-like video: visibility, view class, center + radius, and
orientation, trained end-to-end on a bundled synthetic phantom."""

from .anchors import (AnchorGrid, AnchorTargets, assign_labels, decode,
                      encode_targets, make_anchor_grid, sample_minibatch)
from .autodiff import Tensor, backward
from .evaluator import (EvalReport, aggregate, crossval, evaluate_model,
                        orientation_error, protocol1, protocol2)
from .geometry import (AABox, Circle, DistBox, box_iou, circle_iou,
                       circle_to_box, circle_to_distbox, distbox_to_aabox)
from .gtmaps import FramePrediction, GtMaps, build_gt_maps, select_prediction
from .losses import (LossWeights, cosine_loss, iou_loss, iou_loss_single,
                     smooth_l1, softmax_ce, total_loss)
from .network import Model, ModelConfig, PAPER_SCALE
from .phantom import HeartAnnotation, SubjectParams, generate_clip, subject_params
from .storage import (ClipRecord, DataFormatError, build_corpus, load_checkpoint,
                      load_dataset, save_checkpoint)
from .trainer import TrainConfig, TrainingDiverged, sample_sequences, train

__version__ = "0.1.0"

__all__ = [
    "AABox", "AnchorGrid", "AnchorTargets", "Circle", "ClipRecord",
    "DataFormatError", "DistBox", "EvalReport", "FramePrediction", "GtMaps",
    "HeartAnnotation", "LossWeights", "Model", "ModelConfig", "PAPER_SCALE",
    "SubjectParams", "Tensor", "TrainConfig", "TrainingDiverged", "aggregate",
    "assign_labels", "backward", "box_iou", "build_corpus", "build_gt_maps",
    "circle_iou", "circle_to_box", "circle_to_distbox", "cosine_loss",
    "crossval", "decode", "distbox_to_aabox", "encode_targets",
    "evaluate_model", "generate_clip", "iou_loss", "iou_loss_single",
    "load_checkpoint", "load_dataset", "make_anchor_grid",
    "orientation_error", "protocol1", "protocol2", "sample_minibatch",
    "sample_sequences", "save_checkpoint", "select_prediction", "smooth_l1",
    "softmax_ce", "subject_params", "total_loss", "train",
]
