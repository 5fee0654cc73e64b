from .config import TOGGLE_NAMES, Toggles, TrainConfig, parse_override
from .data import Batch, PreparedSample, collate, epoch_batches, prepare, prepare_all
from .evaluate import (EvalReport, THRESHOLDS, average_precision, compute_report, evaluate_model,
                       match_detections, predict_dataset)
from .loops import MetricsLog, TrainingDiverged, TrainResult, adapt_uda, evaluate, pretrain_source
