"""Teacher-student domain adaptation for camera-only BEV 3D detection on synthetic scenes."""

__version__ = "0.1.0"
