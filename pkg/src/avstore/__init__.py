"""Tiered storage engine for multi-modal vehicle sensor streams."""

from .core import EngineConfig, GpsFix, ImageBuffer, Modality, PointCloud, SensorFrame

__version__ = "0.1.0"

__all__ = ["EngineConfig", "GpsFix", "ImageBuffer", "Modality", "PointCloud", "SensorFrame"]
