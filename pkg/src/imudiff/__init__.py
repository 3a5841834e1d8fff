"""Diffusion-based synthesis of six-axis IMU activity windows."""

__version__ = "0.1.0"

ACTIVITIES = ("Walking", "Running", "JumpUp", "Cycling")
PIDS = (1, 2, 3, 5, 8, 9, 10, 11, 12, 13, 14, 16)
