"""Footprint sexing pipeline.

Library + CLI reproducing a full 2-D footprint analysis workflow: scans are
cropped and rendered into three-kernel composites, landmark shapes are
aligned and compared with classical morphometrics and discriminant
baselines, ridge texture is sampled in physical squares, and a small
multi-task convolutional model estimates sex and age with Grad-CAM
explanations and a scenario harness that toggles shape, texture, and size.
"""

__version__ = "0.1.0"
