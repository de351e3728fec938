"""Assembly Pose - 6D assembly pose estimation from depth images and CAD models"""

__version__ = "0.1.0"
