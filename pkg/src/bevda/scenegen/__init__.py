from .render import (
    CameraRig,
    DomainShiftConfig,
    LidarDepth,
    MultiViewSample,
    SceneSpec,
    ShiftKind,
    downsample_depth,
    generate_dataset,
    generate_sample,
    make_rig,
    project_lidar_depth,
)
from .dataset import FORMAT_VERSION, DatasetFormatError, read_dataset, write_dataset

__all__ = [
    "CameraRig", "DomainShiftConfig", "LidarDepth", "MultiViewSample", "SceneSpec", "ShiftKind",
    "downsample_depth", "generate_dataset", "generate_sample", "make_rig", "project_lidar_depth",
    "FORMAT_VERSION", "DatasetFormatError", "read_dataset", "write_dataset",
]
