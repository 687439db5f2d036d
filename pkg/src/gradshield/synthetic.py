"""Analytic test beds: the hand-built clean/backdoored classifiers and the
spiked-Gaussian gradient model, with brute-force checks of their predictions.

In the hand-built classifiers, input coordinate 0 is the trigger feature and
coordinates ``1..d`` carry the class signal. The sign output of the original
construction is realised as a 2-logit head ``[0, s]`` so that class index 1
stands for label +1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from . import nn
from .defense import minority_cluster
from .numeric import gmm2_fit, leading_right_singular_vector

_PHI = NormalDist().cdf


@dataclass
class AppendixModelParams:
    d: int = 100
    eta: float = 0.3
    psi: float = 1.0
    c: float = 0.5
    w3sq: float = 120.0
    eps: float = 0.1

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not self.psi > self.c > 0:
            raise ValueError("need psi > c > 0")

    @property
    def backdoor_threshold(self) -> float:
        """Smallest third-neuron output weight that makes the backdoor fire on average."""
        return self.eta * self.d / (self.psi - self.c)


@dataclass
class ZModelParams:
    mu: np.ndarray
    eta: float = 1.0
    eps: float = 0.1
    N: int = 5000
    seed: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def with_norm(cls, n: int, mu_norm: float, eta=1.0, eps=0.1, N=5000, seed=0, mu_seed=None):
        return cls(random_direction(n, seed if mu_seed is None else mu_seed) * mu_norm, eta, eps, N, seed)


def random_direction(n: int, seed: int = 0) -> np.ndarray:
    v = np.random.default_rng([seed, 7]).standard_normal(n)
    return v / np.linalg.norm(v)


# -- hand-built classifiers ---------------------------------------------------

def _two_logit_head(out_weights) -> nn.Layer:
    w = np.zeros((len(out_weights), 2))
    w[:, 1] = out_weights
    return nn.Layer(w, np.zeros(2), nn.IDENTITY)


def build_fc(d: int) -> nn.Network:
    """Clean classifier: two hidden ReLU units averaging the d signal features."""
    w = np.zeros((d + 1, 2))
    w[1:, 0] = -1.0 / d
    w[1:, 1] = 1.0 / d
    return nn.Network([nn.Layer(w, np.zeros(2), nn.RELU), _two_logit_head([-1.0, 1.0])])


def build_fp(p: AppendixModelParams) -> nn.Network:
    """Backdoored classifier: the clean pair plus a trigger neuron on feature 0."""
    if not p.w3sq > p.backdoor_threshold:
        raise ValueError(
            f"w3sq={p.w3sq} does not exceed eta*d/(psi-c)={p.backdoor_threshold:.4g}; no working backdoor"
        )
    d = p.d
    w = np.zeros((d + 1, 3))
    w[1:, 0] = -1.0 / d
    w[1:, 1] = 1.0 / d
    w[0, 2] = 1.0 / d
    b = np.array([0.0, 0.0, -p.c / d])
    return nn.Network([nn.Layer(w, b, nn.RELU), _two_logit_head([-1.0, 1.0, p.w3sq])])


def sample_clean(d: int, eta: float, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Clean draws: labels +-1, feature 0 ~ N(0,1), features 1..d ~ N(eta*y, 1)."""
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, -1, 1)
    x = rng.standard_normal((n, d + 1))
    x[:, 1:] += eta * y[:, None]
    return x, y


def sample_poisoned(p: AppendixModelParams, n: int, seed: int = 0) -> np.ndarray:
    """Poisoned draws: feature 0 fixed at psi, features 1..d ~ N(-eta, 1)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p.d + 1)) - p.eta
    x[:, 0] = p.psi
    return x


def fc_accuracy(d: int, eta: float) -> float:
    return _PHI(eta * math.sqrt(d))


def fp_poison_success(p: AppendixModelParams) -> float:
    """Probability that a poisoned draw is classified +1 by the backdoored model."""
    return _PHI((p.psi - p.c) * p.w3sq / math.sqrt(p.d) - p.eta * math.sqrt(p.d))


def sign_accuracy(net: nn.Network, x: np.ndarray, y: np.ndarray) -> float:
    pred = np.where(nn.predict(net, x) == 1, 1, -1)
    return float(np.mean(pred == y))


def hidden_preactivations(net: nn.Network, x: np.ndarray) -> np.ndarray:
    layer = net.layers[0]
    return ((np.atleast_2d(x) - net.input_offset) * net.input_scale) @ layer.weights + layer.bias


def trigger_gradient_dominance(net: nn.Network, x: np.ndarray, label: int = 0) -> np.ndarray:
    """Per draw: is |dE/dx_0| larger than every other |dE/dx_i|?"""
    g = np.abs(nn.input_gradients(net, x, label))
    return g[:, 0] > g[:, 1:].max(axis=1)


@dataclass
class AppendixCheck:
    fc_expected: float
    fc_empirical: float
    fp_expected: float
    fp_empirical: float
    clean_sign_match: float
    gradient_dominance: float
    draws: int

    @property
    def fc_error(self) -> float:
        return abs(self.fc_empirical - self.fc_expected)

    @property
    def fp_error(self) -> float:
        return abs(self.fp_empirical - self.fp_expected)


def verify_appendix_a(p: AppendixModelParams, draws: int = 100_000, seed: int = 0) -> AppendixCheck:
    fc = build_fc(p.d)
    fp = build_fp(p)
    xc, yc = sample_clean(p.d, p.eta, draws, seed)
    xp = sample_poisoned(p, draws, seed + 1)
    # clean x_- draws should light up neuron 1 only
    neg = xc[yc == -1]
    signs = hidden_preactivations(fp, neg)
    match = float(np.mean((signs[:, 0] > 0) & (signs[:, 1] < 0) & (signs[:, 2] < 0)))
    dom = float(np.mean(trigger_gradient_dominance(fp, xp)))
    return AppendixCheck(
        fc_accuracy(p.d, p.eta), sign_accuracy(fc, xc, yc),
        fp_poison_success(p), sign_accuracy(fp, xp, np.ones(draws, dtype=int)),
        match, dom, draws,
    )


# -- spiked Gaussian gradient model -------------------------------------------

def sample_z(p: ZModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Rows theta_i * mu + g_i with theta_i ~ Bernoulli(eps) and g_i ~ N(0, eta I)."""
    rng = np.random.default_rng(p.seed)
    theta = rng.random(p.N) < p.eps
    z = math.sqrt(p.eta) * rng.standard_normal((p.N, p.n)) + theta[:, None] * p.mu
    return z, theta


def normalize_nonzero_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)


@dataclass
class Theorem2Check:
    alignment: float  # |cos| between the top eigenvector of the second-moment matrix and mu
    eigenvalues: tuple[float, float]
    expected: tuple[float, float]
    bulk_mean: float  # mean of all eigenvalues but the top one
    power_alignment: float  # same, for the power-iteration vector on the raw rows

    @property
    def relative_errors(self) -> tuple[float, float]:
        return tuple(abs(a - b) / b for a, b in zip(self.eigenvalues, self.expected))


def verify_theorem2(p: ZModelParams) -> Theorem2Check:
    """Dense eigendecomposition of the empirical second-moment matrix."""
    if p.n > 512:
        raise ValueError("dense check limited to n <= 512")
    z, _ = sample_z(p)
    sigma = z.T @ z / p.N
    vals, vecs = np.linalg.eigh(sigma)
    mu_norm = float(np.linalg.norm(p.mu))
    mu_hat = p.mu / mu_norm if mu_norm > 0 else p.mu
    top = vecs[:, -1]
    pw = leading_right_singular_vector(z, seed=p.seed).vector
    return Theorem2Check(
        alignment=float(abs(top @ mu_hat)),
        eigenvalues=(float(vals[-1]), float(vals[-2])),
        expected=(p.eps * mu_norm**2 + p.eta, p.eta),
        bulk_mean=float(vals[:-1].mean()),
        power_alignment=float(abs(pw @ mu_hat)),
    )


def clustering_error_rate(p: ZModelParams) -> float:
    """Normalize rows, project on the leading singular vector, split with a 2-GMM,
    call the minority cluster poisoned, and score against the true theta."""
    z, theta = sample_z(p)
    rows = normalize_nonzero_rows(z)
    if not np.any(rows):
        return float(np.mean(theta))
    v = leading_right_singular_vector(rows, seed=p.seed).vector
    t = rows @ v
    g = gmm2_fit(t, seed=p.seed)
    pred = np.zeros(p.N, dtype=bool) if g.degenerate else minority_cluster(g, t)
    return float(np.mean(pred != theta))


@dataclass
class Theorem3Grid:
    rows: list[dict] = field(default_factory=list)

    def medians(self, axis: str) -> list[tuple[float, float]]:
        return [(r[axis], r["median_error"]) for r in self.rows if r["axis"] == axis]

    def write_csv(self, path) -> None:
        cols = ["axis", "mu_norm", "N", "eta", "eps", "n", "seeds", "median_error", "mean_error", "max_error"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)


def verify_theorem3(
    mu_norms=(1.0, 2.0, 3.0, 5.0),
    sample_counts=(200, 1000, 5000),
    n: int = 64,
    eta: float = 0.5,
    eps: float = 0.1,
    base_N: int = 2000,
    base_mu_norm: float = 2.0,
    seeds: int = 20,
) -> Theorem3Grid:
    """Median clustering error over seeds, sweeping ||mu|| (at base_N) and N (at base_mu_norm)."""
    grid = Theorem3Grid()
    cells = [("mu_norm", m, base_N) for m in mu_norms] + [("N", base_mu_norm, N) for N in sample_counts]
    for axis, m, N in cells:
        errs = [
            clustering_error_rate(ZModelParams.with_norm(n, m, eta, eps, N, seed=s))
            for s in range(seeds)
        ]
        grid.rows.append({
            "axis": axis, "mu_norm": m, "N": N, "eta": eta, "eps": eps, "n": n, "seeds": seeds,
            "median_error": float(np.median(errs)),
            "mean_error": float(np.mean(errs)),
            "max_error": float(np.max(errs)),
        })
    return grid
