"""Information-driven design of optical encoders.

Encoders (diffractive height maps or Gaussian-sum lenslet PSFs) are
optimized to maximize the mutual information between noiseless and noisy
measurements, either by differentiating through a Gaussian density fit
(``mode="ideal"``) or by refitting the density outside the gradient path
(``mode="ideal_io"``).
"""
from . import bench, config, density, mi, noise, optics, optimize, scenes
from .errors import InfoDesignError

__all__ = ["bench", "config", "density", "mi", "noise", "optics", "optimize", "scenes", "InfoDesignError"]
__version__ = "0.1.0"
