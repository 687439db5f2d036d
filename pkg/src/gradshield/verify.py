"""Named verification suites: gradient exactness, the two spectral results and
the hand-built backdoor classifier. Each returns CSV-ready rows and a verdict."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, synthetic

SUITES = ("prop1", "thm2", "thm3", "appendixA")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    summary: dict
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        if not self.rows:
            return
        cols = list(self.rows[0])
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)


def finite_difference_gradient(net: nn.Network, x: np.ndarray, y: int, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    eye = np.eye(x.size) * step
    plus = nn.loss(net, x + eye, y)
    minus = nn.loss(net, x - eye, y)
    return (plus - minus) / (2 * step)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max entrywise difference relative to the larger gradient's max magnitude."""
    scale = max(np.abs(a).max(), np.abs(b).max())
    return float(np.abs(a - b).max() / scale) if scale > 0 else 0.0


def structural_input_gradient(net: nn.Network, x: np.ndarray, y: int) -> np.ndarray:
    """Input gradient of a one-hidden-layer net written out as the explicit
    double sum over hidden units j and output units l:

        dE/dx_i = sum_j w1[i, j] g'(a_j) sum_l delta_l w2[j, l]
    """
    if len(net.layers) != 2:
        raise ValueError("structural form implemented for one hidden layer")
    l1, l2 = net.layers
    xs = (np.asarray(x, dtype=np.float64) - net.input_offset) * net.input_scale
    a = xs @ l1.weights + l1.bias
    gprime = (a > 0).astype(np.float64)
    z = np.maximum(a, 0.0) @ l2.weights + l2.bias
    p = nn.softmax(z)
    delta = p - np.eye(len(p))[y]
    out = np.zeros(len(xs))
    for i in range(len(xs)):
        total = 0.0
        for j in range(l1.fan_out):
            if gprime[j] == 0.0:
                continue
            inner = 0.0
            for l in range(l2.fan_out):
                inner += delta[l] * l2.weights[j, l]
            total += l1.weights[i, j] * gprime[j] * inner
        out[i] = total
    return out * net.input_scale


def run_prop1(instances: int = 120, seed: int = 0, step: float = 1e-5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(instances):
        depth = int(rng.integers(1, 4))
        hidden = [int(h) for h in rng.integers(2, 33, size=depth - 1)]
        n_in = int(rng.integers(2, 33))
        classes = int(rng.integers(2, 7))
        net = nn.init_mlp(n_in, hidden, classes, seed=int(rng.integers(2**31)))
        for layer in net.layers:
            layer.bias[:] = 0.1 * rng.standard_normal(layer.fan_out)
        x = rng.standard_normal(n_in)
        y = int(rng.integers(classes))
        bp = nn.input_gradient(net, x, y)
        fd = finite_difference_gradient(net, x, y, step)
        row = {"instance": k, "depth": depth, "input_dim": n_in, "classes": classes,
               "fd_rel_error": relative_error(bp, fd), "structural_abs_error": ""}
        if depth == 2:
            row["structural_abs_error"] = float(np.abs(structural_input_gradient(net, x, y) - bp).max())
        rows.append(row)
    fd_max = max(r["fd_rel_error"] for r in rows)
    struct = [r["structural_abs_error"] for r in rows if r["structural_abs_error"] != ""]
    struct_max = max(struct) if struct else 0.0
    passed = fd_max <= 1e-5 and struct_max <= 1e-10 and len(struct) > 0
    return SuiteResult("prop1", passed, {
        "instances": instances, "max_fd_rel_error": fd_max,
        "structural_instances": len(struct), "max_structural_abs_error": struct_max,
    }, rows)


def run_thm2(seeds: int = 10, n: int = 64, mu_norm: float = 3.0, eta: float = 1.0,
             eps: float = 0.1, N: int = 5000, tol: float = 0.10, min_alignment: float = 0.99) -> SuiteResult:
    rows = []
    for s in range(seeds):
        c = synthetic.verify_theorem2(synthetic.ZModelParams.with_norm(n, mu_norm, eta, eps, N, seed=s))
        e1, e2 = c.relative_errors
        rows.append({"seed": s, "n": n, "N": N, "mu_norm": mu_norm, "eta": eta, "eps": eps,
                     "alignment": c.alignment, "power_alignment": c.power_alignment,
                     "lambda1": c.eigenvalues[0], "lambda1_expected": c.expected[0], "lambda1_rel_error": e1,
                     "lambda2": c.eigenvalues[1], "lambda2_expected": c.expected[1], "lambda2_rel_error": e2,
                     "bulk_mean": c.bulk_mean})
    med = lambda k: float(np.median([r[k] for r in rows]))  # noqa: E731
    summary = {
        "median_alignment": med("alignment"),
        "median_lambda1": med("lambda1"), "median_lambda2": med("lambda2"),
        "max_lambda1_rel_error": max(r["lambda1_rel_error"] for r in rows),
        "max_lambda2_rel_error": max(r["lambda2_rel_error"] for r in rows),
        "lambda_expected": [eps * mu_norm**2 + eta, eta],
    }
    passed = (summary["median_alignment"] >= min_alignment
              and summary["max_lambda1_rel_error"] <= tol
              and summary["max_lambda2_rel_error"] <= tol)
    return SuiteResult("thm2", passed, summary, rows)


def run_thm3(seeds: int = 20, max_error: float = 0.05) -> SuiteResult:
    grid = synthetic.verify_theorem3(seeds=seeds)
    anchor = synthetic.clustering_error_rate
    anchor_errs = [
        anchor(synthetic.ZModelParams.with_norm(64, 5.0, 0.5, 0.1, 2000, seed=s)) for s in range(seeds)
    ]
    mu_med = [e for _, e in grid.medians("mu_norm")]
    n_med = [e for _, e in grid.medians("N")]
    mono = lambda v: all(b <= a for a, b in zip(v, v[1:]))  # noqa: E731
    summary = {
        "anchor_median_error": float(np.median(anchor_errs)),
        "mu_norm_medians": mu_med, "N_medians": n_med,
        "monotone_in_mu_norm": mono(mu_med), "monotone_in_N": mono(n_med),
    }
    passed = summary["anchor_median_error"] <= max_error and mono(mu_med) and mono(n_med)
    return SuiteResult("thm3", passed, summary, grid.rows)


def run_appendix_a(draws: int = 100_000, seed: int = 0) -> SuiteResult:
    p = synthetic.AppendixModelParams()
    c = synthetic.verify_appendix_a(p, draws, seed)
    summary = {
        "fp_expected": c.fp_expected, "fp_empirical": c.fp_empirical, "fp_error": c.fp_error,
        "fc_expected": c.fc_expected, "fc_empirical": c.fc_empirical, "fc_error": c.fc_error,
        "gradient_dominance": c.gradient_dominance, "draws": draws,
    }
    passed = c.fp_error <= 0.003 and c.fc_error <= 0.005 and c.gradient_dominance >= 0.99
    return SuiteResult("appendixA", passed, summary, [summary])


def run_suite(name: str, **kwargs) -> SuiteResult:
    runners = {"prop1": run_prop1, "thm2": run_thm2, "thm3": run_thm3, "appendixA": run_appendix_a}
    if name not in runners:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return runners[name](**kwargs)
