"""Rate-distortion solvers over discrete sources.

Blahut-Arimoto for a fixed reproduction alphabet, and alternating
minimization for a reproduction alphabet of fixed size whose points are
moved to Bregman centroids.  Everything here is plain numpy and shares no
code with the training path, so it can serve as a reference for it.
Rates are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 100_000


class ConvergenceError(RuntimeError):
    """Raised when the iteration budget runs out; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass
class RdSolution:
    conditional: np.ndarray
    marginal: np.ndarray
    rate: float
    distortion: float
    iterations: int = 0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "distortion": self.distortion,
            "iterations": self.iterations,
            "marginal": self.marginal.tolist(),
            "conditional": self.conditional.tolist(),
        }


def _check_source(probs):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("source must be a probability vector")
    return p


def _check_distortion(d, n):
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != n:
        raise ValueError(f"distortion matrix must have {n} rows, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distortion entries must be finite and non-negative")
    return d


def rate(probs, conditional) -> float:
    """Mutual information of the joint probs[i] * conditional[i, j], in nats."""
    p = np.asarray(probs, dtype=np.float64)
    c = np.asarray(conditional, dtype=np.float64)
    marginal = p @ c
    joint = p[:, None] * c
    pos = joint > 0
    denom = p[:, None] * marginal[None, :]
    terms = np.where(pos, joint * np.log(np.where(pos, joint, 1.0) / np.where(pos, denom, 1.0)), 0.0)
    return float(max(terms.sum(), 0.0))


def expected_distortion(probs, conditional, d) -> float:
    return float(np.sum(np.asarray(probs)[:, None] * conditional * d))


def _conditional(log_marginal, d, alpha):
    logits = log_marginal[None, :] - alpha * d
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _lagrangian(p, cond, marginal, d, alpha):
    pos = cond > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pos, cond, 1.0) / np.where(pos, marginal[None, :], 1.0)
    info = np.sum(p[:, None] * np.where(pos, cond * np.log(ratio), 0.0))
    return float(info + alpha * np.sum(p[:, None] * cond * d))


def blahut_arimoto(source, distortion, alpha: float, tol: float = DEFAULT_TOL,
                   max_iters: int = DEFAULT_MAX_ITERS) -> RdSolution:
    """Minimize I(X; Xhat) + alpha * E[d] over p(xhat | x).

    Starts from a uniform reproduction marginal and alternates the
    conditional and marginal updates until the Lagrangian moves by less than
    ``tol``.  ``history`` lists the Lagrangian after every iteration.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    p = _check_source(source)
    d = _check_distortion(distortion, p.size)
    m = d.shape[1]
    marginal = np.full(m, 1.0 / m)
    history = []
    prev = np.inf
    for it in range(1, max_iters + 1):
        with np.errstate(divide="ignore"):
            cond = _conditional(np.log(marginal), d, alpha)
        marginal = p @ cond
        value = _lagrangian(p, cond, marginal, d, alpha)
        history.append(value)
        if abs(prev - value) < tol:
            break
        prev = value
    else:
        last = _solution(p, cond, d, max_iters, history)
        raise ConvergenceError(f"Blahut-Arimoto did not converge in {max_iters} iterations", last)
    return _solution(p, cond, d, it, history)


def _solution(p, cond, d, iterations, history):
    return RdSolution(conditional=cond, marginal=p @ cond, rate=rate(p, cond),
                      distortion=expected_distortion(p, cond, d),
                      iterations=iterations, history=history)


# Bregman divergences ---------------------------------------------------------

GENERATORS = ("squared_euclidean", "negative_entropy")


def bregman_divergence(generator: str, x, y) -> float:
    """f(x) - f(y) - <x - y, grad f(y)> for f = ||.||^2 or sum x log x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    if generator == "squared_euclidean":
        return float(x @ x - y @ y - (x - y) @ (2 * y))
    if generator == "negative_entropy":
        for v, nm in ((x, "x"), (y, "y")):
            if np.any(v <= 0) or abs(v.sum() - 1.0) > 1e-12:
                raise ValueError(f"{nm} must be a probability vector with positive entries")
        fx = np.sum(x * np.log(x))
        fy = np.sum(y * np.log(y))
        return float(fx - fy - (x - y) @ (np.log(y) + 1.0))
    raise ValueError(f"unknown generator '{generator}', expected one of {GENERATORS}")


def pairwise_bregman(generator: str, points, reps) -> np.ndarray:
    """Vectorized D_f(points[i], reps[j]) -> (n, m)."""
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(reps, dtype=np.float64)
    if generator == "squared_euclidean":
        return np.maximum(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1), 0.0)
    if generator == "negative_entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            xlogx = np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)
        # generalized KL: sum x log(x/y) - sum x + sum y
        div = (xlogx.sum(-1)[:, None] - x @ np.log(y).T
               - x.sum(-1)[:, None] + y.sum(-1)[None, :])
        return np.maximum(div, 0.0)
    raise ValueError(f"unknown generator '{generator}', expected one of {GENERATORS}")


# RDFC ----------------------------------------------------------------------


def init_reproductions(points, m: int, rng: np.random.Generator, method: str = "sample"):
    """Pick m starting reproduction points from the source support.

    ``sample`` draws m distinct points uniformly; ``kmeans++`` draws each
    next point with probability proportional to its squared distance from
    the closest point already chosen.
    """
    x = np.asarray(points, dtype=np.float64)
    if m < 1 or m > len(x):
        raise ValueError(f"need 1 <= m <= {len(x)}, got {m}")
    if method == "sample":
        return x[rng.choice(len(x), size=m, replace=False)].copy()
    if method == "kmeans++":
        chosen = [int(rng.integers(len(x)))]
        for _ in range(1, m):
            d2 = ((x[:, None, :] - x[chosen][None, :, :]) ** 2).sum(-1).min(axis=1)
            if d2.sum() == 0:
                rest = [i for i in range(len(x)) if i not in chosen]
                chosen.append(int(rng.choice(rest)))
            else:
                chosen.append(int(rng.choice(len(x), p=d2 / d2.sum())))
        return x[chosen].copy()
    raise ValueError(f"unknown init method '{method}'")


@dataclass
class RdfcResult:
    reproductions: np.ndarray
    solution: RdSolution
    objective_trace: list


def rdfc_alternating(source, points, reproduction_init, alpha: float,
                     generator: str = "squared_euclidean", tol: float = DEFAULT_TOL,
                     max_iters: int = DEFAULT_MAX_ITERS) -> RdfcResult:
    """Locally optimal reproduction set of fixed size m.

    Each round runs three sub-steps, each of which cannot increase
    I + alpha * E[d]: conditional update, marginal update, and moving every
    reproduction to the posterior-weighted mean of the source points (the
    minimizer of a Bregman divergence in its second argument).  Reproductions
    with no posterior mass stay put.  ``objective_trace`` records the
    objective after every sub-step.
    """
    p = _check_source(source)
    x = np.asarray(points, dtype=np.float64)
    reps = np.array(reproduction_init, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != p.size:
        raise ValueError("points must be an (n, dim) array matching the source")
    if reps.ndim != 2 or reps.shape[0] < 1 or reps.shape[1] != x.shape[1]:
        raise ValueError("reproduction_init must be an (m, dim) array with m >= 1")
    m = reps.shape[0]
    marginal = np.full(m, 1.0 / m)
    trace = []
    prev = np.inf
    for it in range(1, max_iters + 1):
        d = pairwise_bregman(generator, x, reps)
        with np.errstate(divide="ignore"):
            cond = _conditional(np.log(marginal), d, alpha)
        trace.append(_lagrangian(p, cond, marginal, d, alpha))
        marginal = p @ cond
        trace.append(_lagrangian(p, cond, marginal, d, alpha))
        weights = p[:, None] * cond
        mass = weights.sum(axis=0)
        live = mass > 0
        reps[live] = (weights[:, live].T @ x) / mass[live, None]
        d = pairwise_bregman(generator, x, reps)
        value = _lagrangian(p, cond, marginal, d, alpha)
        trace.append(value)
        if abs(prev - value) < tol:
            break
        prev = value
    else:
        sol = _solution(p, cond, d, max_iters, trace)
        raise ConvergenceError(f"RDFC did not converge in {max_iters} iterations",
                               RdfcResult(reps, sol, trace))
    return RdfcResult(reps, _solution(p, cond, d, it, trace), trace)


# centroid check --------------------------------------------------------------


def discrete_kl(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pos = p > 0
    if np.any(pos & (q <= 0)):
        return float("inf")
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def verify_centroid(dists, weights, trials: int = 100, perturb_scale: float = 0.5,
                    rng: np.random.Generator | None = None) -> bool:
    """Check that the weighted mixture minimizes sum_i w_i KL(p_i || q) over q.

    The mixture's objective is compared with ``trials`` random simplex points
    near it (multiplicative log-normal jitter blended with a Dirichlet draw).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    P = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mixture = w @ P

    def objective(q):
        return sum(wi * discrete_kl(pi, q) for wi, pi in zip(w, P) if wi > 0)

    best = objective(mixture)
    n = P.shape[1]
    for _ in range(trials):
        jitter = mixture * np.exp(perturb_scale * rng.normal(size=n))
        jitter /= jitter.sum()
        lam = rng.uniform(0.0, min(perturb_scale, 1.0))
        q = (1 - lam) * jitter + lam * rng.dirichlet(np.ones(n))
        if best > objective(q) + 1e-12:
            return False
    return True
