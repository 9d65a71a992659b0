"""Oriented object detection with deformable attention, in pure numpy."""

__version__ = "0.1.0"
