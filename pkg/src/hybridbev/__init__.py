"""Radar-camera BEV fusion for 3D detection, in numpy with hand-written gradients."""
from .geometry import BevGrid, CameraCalib, DepthBins
from .head import CLASSES, Box3D, Detection

__all__ = ["BevGrid", "Box3D", "CLASSES", "CameraCalib", "DepthBins", "Detection"]
__version__ = "0.1.0"
