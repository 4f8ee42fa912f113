"""Diagonal Gaussians over the latent space.

Means and scales are :class:`~dab.diffcore.Tensor` objects so that KL
divergences and samples stay differentiable.  Leading axes are batch axes;
the last axis is the latent dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

SCALE_OFFSET = 5.0
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class DiagGaussian:
    mean: dc.Tensor
    scale: dc.Tensor

    def __post_init__(self):
        object.__setattr__(self, "mean", dc.as_tensor(self.mean))
        object.__setattr__(self, "scale", dc.as_tensor(self.scale))
        if self.mean.shape != self.scale.shape:
            raise ValueError(f"mean shape {self.mean.shape} != scale shape {self.scale.shape}")
        if np.any(self.scale.data <= 0):
            raise ValueError("scale entries must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> np.ndarray:
        return self.scale.data ** 2

    def __getitem__(self, index):
        return DiagGaussian(self.mean[index], self.scale[index])

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(dc.constant(self.mean.data), dc.constant(self.scale.data))


def from_raw(mean_raw, scale_raw) -> DiagGaussian:
    """Encoder head outputs to a Gaussian: scale = softplus(raw - 5), floored."""
    mean_raw, scale_raw = dc.as_tensor(mean_raw), dc.as_tensor(scale_raw)
    if mean_raw.shape != scale_raw.shape:
        raise ValueError(f"raw mean {mean_raw.shape} and raw scale {scale_raw.shape} differ")
    scale = dc.clip_min(dc.softplus(scale_raw - SCALE_OFFSET), SCALE_FLOOR)
    return DiagGaussian(mean_raw, scale)


def _check_dims(p: DiagGaussian, q: DiagGaussian):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def kl(p: DiagGaussian, q: DiagGaussian) -> dc.Tensor:
    """KL(p || q) summed over the last axis; batch axes broadcast."""
    _check_dims(p, q)
    var_p = dc.square(p.scale)
    var_q = dc.square(q.scale)
    per_dim = (dc.log(q.scale) - dc.log(p.scale)
               + (var_p + dc.square(p.mean - q.mean)) / (2.0 * var_q) - 0.5)
    return per_dim.sum(axis=-1)


def kl_matrix(p: DiagGaussian, q: DiagGaussian) -> dc.Tensor:
    """Pairwise KL(p_i || q_j) for a batch of B encoders and k centroids -> (B, k)."""
    _check_dims(p, q)
    b, d = p.mean.shape
    k = q.mean.shape[0]
    pe = DiagGaussian(p.mean.reshape(b, 1, d), p.scale.reshape(b, 1, d))
    qe = DiagGaussian(q.mean.reshape(1, k, d), q.scale.reshape(1, k, d))
    return kl(pe, qe)


def sample(p: DiagGaussian, noise) -> dc.Tensor:
    """Reparameterized draw mean + scale * noise; noise comes from the caller."""
    noise = dc.as_tensor(noise)
    if noise.shape != p.mean.shape:
        raise ValueError(f"noise shape {noise.shape} does not match {p.mean.shape}")
    return p.mean + p.scale * noise


def log_prob(p: DiagGaussian, z) -> dc.Tensor:
    z = dc.as_tensor(z)
    if z.shape[-1] != p.dim:
        raise ValueError(f"dimension mismatch: {z.shape[-1]} vs {p.dim}")
    quad = dc.square(z - p.mean) / (2.0 * dc.square(p.scale))
    return -0.5 * p.dim * math.log(2 * math.pi) - (dc.log(p.scale) + quad).sum(axis=-1)
