from .checkpoint import Checkpoint, CheckpointError, load_params, state_of
from .decode import Detection, decode_detections, detections_to_boxes
from .losses import focal_heatmap_loss, gaussian_radius, loss_depth, loss_detection, render_targets
from .model import (BEVDetector, NetConfig, dropout, forward_to_spaces, predict_depth_dist,
                    seeded_generator)
