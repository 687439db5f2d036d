"""Dense linear-algebra and statistics primitives used across the pipeline.

Everything here is a pure function of its inputs (plus an explicit seed) and
works in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-12
# EM restarts: split the sorted samples at these quantiles, keep the best likelihood
INIT_SPLITS = (0.5, 0.25, 0.75, 0.1, 0.9)


class DegenerateInputError(ValueError):
    pass


@dataclass
class SingularVectorResult:
    vector: np.ndarray
    value: float  # Rayleigh quotient of M^T M at `vector`
    iterations: int
    converged: bool
    residual: float


@dataclass(frozen=True)
class Gaussian1D:
    mean: float
    variance: float
    weight: float = 1.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass
class GmmResult:
    components: tuple[Gaussian1D, Gaussian1D]
    assignments: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    degenerate: bool = False
    history: list[float] = field(default_factory=list)

    def cluster_sizes(self) -> tuple[int, int]:
        counts = np.bincount(self.assignments, minlength=2)
        return int(counts[0]), int(counts[1])


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip `v` so that its largest-magnitude entry is positive."""
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def leading_right_singular_vector(
    m, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0
) -> SingularVectorResult:
    """Power iteration on the Gram matrix ``M^T M``.

    Convergence is declared once ``||G v - lam v|| <= tol * lam``. If that never
    happens within `max_iter` steps the last iterate is returned with
    ``converged=False``.
    """
    a = as_matrix(m)
    if a.size == 0:
        raise DegenerateInputError("degenerate input: empty matrix")
    if tol <= 0:
        raise ValueError("tol must be positive")
    gram = a.T @ a
    if not np.any(gram):
        raise DegenerateInputError("degenerate input: zero matrix")

    rng = np.random.default_rng(seed)
    # start from the column-norm profile plus a seeded jitter so that the start
    # is never orthogonal to the leading direction
    v = np.sqrt(np.diag(gram)) + 1e-3 * rng.standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)

    lam = 0.0
    residual = math.inf
    for it in range(1, max_iter + 1):
        w = gram @ v
        lam = float(v @ w)
        residual = float(np.linalg.norm(w - lam * v))
        if residual <= tol * lam:
            return SingularVectorResult(canonical_sign(v), lam, it, True, residual)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise DegenerateInputError("degenerate input: iterate collapsed to zero")
        v = w / norm
    w = gram @ v
    lam = float(v @ w)
    residual = float(np.linalg.norm(w - lam * v))
    return SingularVectorResult(
        canonical_sign(v), lam, max_iter, residual <= tol * lam, residual
    )


def _log_normal_pdf(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def _moments(x: np.ndarray, var_floor: float) -> tuple[float, float]:
    mean = float(np.mean(x))
    return mean, max(float(np.mean((x - mean) ** 2)), var_floor)


def _em(x, lo, hi, max_iter, tol, var_floor):
    means = np.empty(2)
    variances = np.empty(2)
    means[0], variances[0] = _moments(lo, var_floor)
    means[1], variances[1] = _moments(hi, var_floor)
    weights = np.array([lo.size, hi.size], dtype=np.float64) / x.size

    history: list[float] = []
    converged = False
    it = 0
    resp = None
    for it in range(1, max_iter + 1):
        # E step
        logp = np.stack(
            [np.log(weights[k]) + _log_normal_pdf(x, means[k], variances[k]) for k in range(2)],
            axis=1,
        )
        top = logp.max(axis=1, keepdims=True)
        log_norm = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        ll = float(log_norm.sum())
        resp = np.exp(logp - log_norm[:, None])
        if history and abs(ll - history[-1]) <= tol * max(1.0, abs(history[-1])):
            history.append(ll)
            converged = True
            break
        history.append(ll)
        # M step
        nk = resp.sum(axis=0)
        if np.any(nk <= 0.0):
            break
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum(
            (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, var_floor
        )
    comps = tuple(
        Gaussian1D(float(means[k]), float(variances[k]), float(weights[k])) for k in range(2)
    )
    return comps, resp, it, converged, history


def gmm2_fit(
    samples,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-10,
    var_floor: float = VAR_FLOOR,
) -> GmmResult:
    """Fit a two-component 1-D Gaussian mixture with EM.

    EM is restarted from several deterministic splits of the sorted samples
    (median first) and the highest-likelihood fit wins; `seed` is accepted for
    interface symmetry only.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("gmm2_fit needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    del seed

    if np.all(x == x[0]):
        g = Gaussian1D(float(x[0]), var_floor, 0.5)
        return GmmResult(
            (g, g), np.zeros(x.size, dtype=np.int64), 0.0, 0, True, degenerate=True
        )

    xs = np.sort(x, kind="stable")
    best = None
    for q in INIT_SPLITS:
        k = min(max(int(round(q * x.size)), 1), x.size - 1)
        if xs[k - 1] == xs[k] and q != 0.5:
            continue
        fit = _em(x, xs[:k], xs[k:], max_iter, tol, var_floor)
        if best is None or fit[-1][-1] > best[-1][-1] + 1e-9:
            best = fit
    comps, resp, it, converged, history = best
    assignments = np.argmax(resp, axis=1).astype(np.int64)
    degenerate = bool(np.all(assignments == assignments[0]))
    return GmmResult(comps, assignments, history[-1], it, converged, degenerate, history)


def wasserstein2_gaussians(a: Gaussian1D, b: Gaussian1D) -> float:
    """Closed-form W2 distance between two 1-D normals (weights ignored)."""
    return math.hypot(a.mean - b.mean, a.std - b.std)


def gaussian_vector(n: int, mean: float = 0.0, variance: float = 1.0, seed: int = 0) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if variance < 0:
        raise ValueError("variance must be non-negative")
    rng = np.random.default_rng(seed)
    return mean + math.sqrt(variance) * rng.standard_normal(n)
