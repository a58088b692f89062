"""Semantic lidar odometry, drift compensation, and coverage planning at desk scale."""

__version__ = "0.1.0"
