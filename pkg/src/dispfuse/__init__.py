"""Unsupervised fusion of disparity maps.

A refiner network fuses several noisy disparity maps of a rectified stereo
pair into one, trained without ground truth against photometric,
smoothness, input-agreement and multi-scale adversarial terms.  Everything
runs on a small numpy reverse-mode autodiff engine (:mod:`dispfuse.tensor`).
"""

__version__ = "0.1.0"
