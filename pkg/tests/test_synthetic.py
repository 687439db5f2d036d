import math
from statistics import NormalDist

import numpy as np
import pytest

from gradshield import synthetic
from gradshield.synthetic import AppendixModelParams, ZModelParams

PHI = NormalDist().cdf


def test_fc_accuracy_formula():
    assert synthetic.fc_accuracy(100, 0.3) == pytest.approx(0.99865, abs=1e-5)
    assert synthetic.fc_accuracy(100, 0.0) == 0.5


def test_fc_empirical_accuracy():
    x, y = synthetic.sample_clean(100, 0.1, 100_000, seed=1)
    acc = synthetic.sign_accuracy(synthetic.build_fc(100), x, y)
    assert acc == pytest.approx(PHI(1.0), abs=0.005)


def test_fp_success_formula():
    p = AppendixModelParams(d=100, eta=0.3, psi=1.0, c=0.5, w3sq=120.0)
    assert synthetic.fp_poison_success(p) == pytest.approx(PHI(3.0))


def test_fp_requires_working_backdoor():
    p = AppendixModelParams(d=100, eta=0.3, psi=1.0, c=0.5, w3sq=60.0)
    assert p.backdoor_threshold == pytest.approx(60.0)
    with pytest.raises(ValueError, match="no working backdoor"):
        synthetic.build_fp(p)
    with pytest.raises(ValueError):
        AppendixModelParams(psi=0.5, c=1.0)


def test_fp_clean_activation_signs():
    p = AppendixModelParams(d=100, eta=3 / math.sqrt(100), psi=4.0, c=3.0, w3sq=100.0)
    fp = synthetic.build_fp(p)
    x, y = synthetic.sample_clean(p.d, p.eta, 20_000, seed=2)
    a = synthetic.hidden_preactivations(fp, x[y == -1])
    match = np.mean((a[:, 0] > 0) & (a[:, 1] < 0) & (a[:, 2] < 0))
    assert match >= 0.95


def test_fp_poison_rate_follows_formula_off_default():
    p = AppendixModelParams(d=64, eta=0.25, psi=1.5, c=0.5, w3sq=20.0)
    x = synthetic.sample_poisoned(p, 100_000, seed=3)
    rate = synthetic.sign_accuracy(synthetic.build_fp(p), x, np.ones(len(x), dtype=int))
    assert rate == pytest.approx(synthetic.fp_poison_success(p), abs=0.005)


def test_sample_z_noiseless():
    p = ZModelParams.with_norm(8, 2.0, eta=0.0, eps=1.0, N=50)
    z, theta = synthetic.sample_z(p)
    assert theta.all()
    np.testing.assert_array_equal(z, np.tile(p.mu, (50, 1)))


def test_sample_z_pure_noise_second_moment():
    p = ZModelParams(np.zeros(16), eta=2.0, eps=0.0, N=100_000, seed=4)
    z, theta = synthetic.sample_z(p)
    assert not theta.any()
    sigma = z.T @ z / p.N
    target = 2.0 * np.eye(16)
    assert np.linalg.norm(sigma - target) / np.linalg.norm(target) <= 0.05


def test_sample_z_poison_fraction():
    p = ZModelParams.with_norm(4, 1.0, eps=0.1, N=10_000, seed=5)
    _, theta = synthetic.sample_z(p)
    sd = math.sqrt(p.N * 0.1 * 0.9)
    assert abs(theta.sum() - 1000) <= 3 * sd


def test_spike_checker_is_the_dense_oracle():
    p = ZModelParams.with_norm(64, 3.0, 1.0, 0.1, 5000, seed=0)
    c = synthetic.verify_theorem2(p)
    z, _ = synthetic.sample_z(p)
    vals = np.linalg.eigvalsh(z.T @ z / p.N)
    assert c.eigenvalues == pytest.approx((vals[-1], vals[-2]))
    assert c.expected == pytest.approx((1.9, 1.0))
    assert c.relative_errors[0] <= 0.10
    assert c.power_alignment == pytest.approx(c.alignment, abs=1e-4)


def test_second_eigenvalue_bias_shrinks_with_N():
    # second eigenvalue sits near the noise bulk edge eta*(1+sqrt(n/N))^2, approaching eta as N grows
    errs = []
    for N in (5000, 50_000):
        c = synthetic.verify_theorem2(ZModelParams.with_norm(64, 3.0, 1.0, 0.1, N, seed=1))
        assert c.eigenvalues[1] == pytest.approx((1 + math.sqrt(64 / N)) ** 2, rel=0.05)
        errs.append(c.relative_errors[1])
    assert errs[1] < errs[0] and errs[1] <= 0.10


def test_spike_alignment_null_and_noiseless():
    cos = [synthetic.verify_theorem2(ZModelParams.with_norm(64, 3.0, 1.0, 0.0, 5000, seed=s)).alignment
           for s in range(10)]
    assert max(cos) <= 4 / math.sqrt(64)
    c = synthetic.verify_theorem2(ZModelParams.with_norm(64, 3.0, 0.0, 0.5, 2000, seed=0))
    assert c.alignment == pytest.approx(1.0, abs=1e-9)


def test_clustering_error_anchor_and_trend():
    e5 = [synthetic.clustering_error_rate(ZModelParams.with_norm(64, 5.0, 0.5, 0.1, 2000, seed=s))
          for s in range(5)]
    e1 = [synthetic.clustering_error_rate(ZModelParams.with_norm(64, 1.0, 0.5, 0.1, 2000, seed=s))
          for s in range(5)]
    assert np.median(e5) <= 0.05
    assert np.median(e5) <= np.median(e1)


def test_clustering_noiseless_is_exact():
    assert synthetic.clustering_error_rate(ZModelParams.with_norm(64, 2.0, 0.0, 0.1, 500, seed=0)) == 0.0


def test_clustering_grid_csv(tmp_path):
    grid = synthetic.verify_theorem3(mu_norms=(1.0, 5.0), sample_counts=(200,), seeds=2, base_N=300)
    path = tmp_path / "g.csv"
    grid.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("axis,mu_norm,N")
    assert len(lines) == 4
