"""pvkit: LiDAR-camera fusion video panoptic segmentation toolkit (desk scale)."""

__version__ = "0.1.0"
