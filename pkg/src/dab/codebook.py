"""Codebook of Gaussian centroids with soft assignments.

Centroid means are trainable tensors; centroid variances are updated in
closed form from weighted encoder moments accumulated over a pass and
committed at the end of it.  The marginal ``pi`` is tracked by a moving
average and committed once per epoch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .gauss import DiagGaussian, kl_matrix

VARIANCE_FLOOR = 1e-6
SIMPLEX_TOL = 1e-12
# Distances this far below zero are rounding noise from a KL of equal Gaussians.
NEG_DISTANCE_TOL = 1e-12

MAGIC = b"DABC"
VERSION = 1


class CodebookFormatError(ValueError):
    pass


@dataclass
class Codebook:
    means: dc.Tensor
    variances: np.ndarray
    pi: np.ndarray
    alpha: float
    gamma: float
    pi_ma: np.ndarray = None
    cov_num: np.ndarray = None
    cov_den: np.ndarray = None

    def __post_init__(self):
        if not isinstance(self.means, dc.Tensor) or not self.means.requires_grad:
            self.means = dc.parameter(self.means, name="codebook.means")
        k, d = self.means.shape
        self.variances = np.array(self.variances, dtype=np.float64).reshape(k, d)
        self.pi = np.array(self.pi, dtype=np.float64)
        if self.pi_ma is None:
            self.pi_ma = self.pi.copy()
        if self.cov_num is None:
            self.cov_num = np.zeros((k, d))
        if self.cov_den is None:
            self.cov_den = np.zeros(k)
        self.validate()

    @classmethod
    def init(cls, k: int, dim: int, alpha: float, gamma: float,
             rng: np.random.Generator) -> "Codebook":
        """Means ~ N(0, 0.1^2), unit variances, uniform pi."""
        if k < 1:
            raise ValueError("codebook needs at least one centroid")
        means = rng.normal(0.0, 0.1, size=(k, dim))
        return cls(means, np.ones((k, dim)), np.full(k, 1.0 / k), alpha, gamma)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def centroids(self) -> DiagGaussian:
        """All centroids as one batched Gaussian; gradients reach the means only."""
        return DiagGaussian(self.means, dc.constant(np.sqrt(self.variances)))

    def validate(self):
        k, d = self.means.shape
        if self.pi.shape != (k,) or self.pi_ma.shape != (k,):
            raise ValueError("pi must have one entry per centroid")
        _check_simplex(self.pi, "pi")
        if np.any(self.pi_ma < 0):
            raise ValueError("pi moving average has negative entries")
        if not np.all(np.isfinite(self.variances)) or np.any(self.variances <= 0):
            raise ValueError("centroid variances must be finite and positive")
        if self.cov_num.shape != (k, d) or self.cov_den.shape != (k,):
            raise ValueError("covariance accumulators have the wrong shape")
        if np.any(self.cov_den < 0) or np.any(self.cov_num < 0):
            raise ValueError("covariance accumulators must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def distances(self, encoders: DiagGaussian) -> dc.Tensor:
        """KL(encoder_i || centroid_k) as a differentiable (B, k) tensor."""
        return kl_matrix(encoders, self.centroids())

    def copy(self) -> "Codebook":
        return Codebook(self.means.data.copy(), self.variances.copy(), self.pi.copy(),
                        self.alpha, self.gamma, self.pi_ma.copy(), self.cov_num.copy(),
                        self.cov_den.copy())


def _check_simplex(p, what):
    p = np.asarray(p)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{what} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{what} sums to {p.sum():.15g}, not 1")


def _clean_distances(distances):
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    if np.any(d < -NEG_DISTANCE_TOL):
        raise ValueError(f"negative distance {d.min():.3g}")
    return np.maximum(d, 0.0)


def assignment_probs(distances, pi, alpha: float) -> np.ndarray:
    """pi(k) exp(-alpha D_k) / Z over the last axis, via log-sum-exp.

    Returns a plain array: the result is a constant for any gradient.
    """
    d = _clean_distances(distances)
    pi = np.asarray(pi, dtype=np.float64)
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not np.any(pi > 0):
        raise ValueError("pi has no positive entry")
    # shifting by the row minimum keeps logits small, so large distances lose no precision
    d = d - d.min(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        logits = np.log(pi) - alpha * d
    rows = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    return rows / rows.sum(axis=-1, keepdims=True)


def expected_distortion(rows, distances) -> dc.Tensor:
    """Per-encoder sum_k rows[k] * D_k, differentiable through the distances."""
    return (dc.as_tensor(distances) * dc.constant(rows)).sum(axis=-1)


def uncertainty(encoder: DiagGaussian, cb: Codebook):
    """Conditional expected KL of the encoder(s) from the codebook.

    One deterministic pass; a single encoder gives a float, a batch gives an
    array.
    """
    if encoder.dim != cb.dim:
        raise ValueError(f"dimension mismatch: encoder {encoder.dim} vs codebook {cb.dim}")
    single = encoder.mean.ndim == 1
    enc = encoder.detach()
    if single:
        enc = DiagGaussian(enc.mean.reshape(1, -1), enc.scale.reshape(1, -1))
    dist = kl_matrix(enc, cb.centroids().detach()).data
    rows = assignment_probs(dist, cb.pi, cb.alpha)
    u = np.sum(rows * np.maximum(dist, 0.0), axis=-1)
    return float(u[0]) if single else u


def mutual_information(rows, pi) -> float:
    """Plug-in I(P_X; Q) = mean_i sum_k rows[i,k] ln(rows[i,k] / pi[k]) in nats."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    pi = np.asarray(pi, dtype=np.float64)
    if rows.shape[0] < 1:
        raise ValueError("need at least one row")
    if np.any((pi[None, :] == 0) & (rows > 0)):
        raise ValueError("row puts mass on a centroid with zero marginal probability")
    pos = rows > 0
    # difference of logs, since rows / pi overflows when pi underflows
    log_rows = np.log(np.where(pos, rows, 1.0))
    log_pi = np.log(np.where(pi > 0, pi, 1.0))[None, :]
    terms = np.where(pos, rows * (log_rows - log_pi), 0.0)
    return float(max(terms.sum(axis=1).mean(), 0.0))


def update_marginal(cb: Codebook, rows) -> np.ndarray:
    """pi_ma <- gamma * pi_ma + (1 - gamma) * batch mean of the rows."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[0] == 0:
        raise ValueError("empty batch")
    if rows.shape[1] != cb.k:
        raise ValueError(f"rows have {rows.shape[1]} columns, codebook has {cb.k}")
    cb.pi_ma = cb.gamma * cb.pi_ma + (1.0 - cb.gamma) * rows.mean(axis=0)
    return cb.pi_ma


def commit_marginal(cb: Codebook) -> np.ndarray:
    cb.pi = cb.pi_ma / cb.pi_ma.sum()
    cb.pi_ma = cb.pi.copy()
    return cb.pi


def reset_covariances(cb: Codebook):
    cb.cov_num = np.zeros_like(cb.cov_num)
    cb.cov_den = np.zeros_like(cb.cov_den)


def update_covariances(cb: Codebook, encoders: DiagGaussian, rows):
    """Accumulate sum_i w_ik (sigma_i^2 + (mu_i - m_k)^2) and sum_i w_ik."""
    if encoders.dim != cb.dim:
        raise ValueError(f"dimension mismatch: encoder {encoders.dim} vs codebook {cb.dim}")
    mu = np.atleast_2d(encoders.mean.data)
    var = np.atleast_2d(encoders.variance)
    w = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    m = cb.means.data
    # (B, k, d) second moments about each centroid mean
    moments = var[:, None, :] + (mu[:, None, :] - m[None, :, :]) ** 2
    cb.cov_num = cb.cov_num + np.einsum("bk,bkd->kd", w, moments)
    cb.cov_den = cb.cov_den + w.sum(axis=0)
    if np.any(cb.cov_num < 0) or np.any(cb.cov_den < 0):
        raise RuntimeError("covariance accumulator went negative")


def commit_covariances(cb: Codebook) -> np.ndarray:
    """variance <- numerator / denominator, floored; empty centroids keep theirs."""
    has = cb.cov_den > 0
    new = cb.variances.copy()
    new[has] = np.maximum(cb.cov_num[has] / cb.cov_den[has, None], VARIANCE_FLOOR)
    cb.variances = new
    reset_covariances(cb)
    return new


def hard_assignments(distances) -> np.ndarray:
    """Index of the closest centroid per row; ties go to the lowest index."""
    return np.argmin(np.asarray(distances), axis=-1)


# persistence ---------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIdd")


def serialize(cb: Codebook) -> bytes:
    """Little-endian layout: magic, version, k, d, alpha, gamma, then the f64
    arrays means(k*d), variances(k*d), pi(k), pi_ma(k), cov_num(k*d), cov_den(k)."""
    parts = [_HEADER.pack(MAGIC, VERSION, cb.k, cb.dim, cb.alpha, cb.gamma)]
    for arr in (cb.means.data, cb.variances, cb.pi, cb.pi_ma, cb.cov_num, cb.cov_den):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def serialized_size(k: int, d: int) -> int:
    return _HEADER.size + 8 * (3 * k * d + 3 * k)


def deserialize(blob: bytes) -> Codebook:
    if len(blob) < _HEADER.size:
        raise CodebookFormatError("codebook data truncated in header")
    magic, version, k, d, alpha, gamma = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CodebookFormatError(f"bad codebook magic {magic!r}")
    if version != VERSION:
        raise CodebookFormatError(f"unsupported codebook version {version}")
    if len(blob) != serialized_size(k, d):
        raise CodebookFormatError(
            f"codebook data has {len(blob)} bytes, expected {serialized_size(k, d)}")
    off = _HEADER.size

    def take(n, shape):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr.reshape(shape)

    means = take(k * d, (k, d))
    variances = take(k * d, (k, d))
    pi = take(k, (k,))
    pi_ma = take(k, (k,))
    cov_num = take(k * d, (k, d))
    cov_den = take(k, (k,))
    try:
        return Codebook(means, variances, pi, alpha, gamma, pi_ma, cov_num, cov_den)
    except ValueError as exc:
        raise CodebookFormatError(f"invalid codebook: {exc}") from exc
