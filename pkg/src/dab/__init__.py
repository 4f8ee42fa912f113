"""Distance-aware bottleneck: a variational information bottleneck whose
training encoders are quantized by a small codebook of Gaussians, giving a
single-pass uncertainty score (expected KL from the codebook).
"""

from .codebook import Codebook
from .datasets import Dataset
from .gauss import DiagGaussian
from .model import DabConfig, DabModel, predict_with_uncertainty, score, train

__all__ = ["Codebook", "DabConfig", "DabModel", "Dataset", "DiagGaussian",
           "predict_with_uncertainty", "score", "train"]
__version__ = "0.1.0"
