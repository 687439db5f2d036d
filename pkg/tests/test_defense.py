import numpy as np
import pytest

from gradshield import defense, nn, poisonlab
from gradshield.numeric import gmm2_fit, leading_right_singular_vector
from gradshield.synthetic import ZModelParams, normalize_nonzero_rows, sample_z


def test_config_invariants():
    with pytest.raises(ValueError):
        defense.NeutralizeConfig(rho=-1)
    with pytest.raises(ValueError):
        defense.NeutralizeConfig(tau=1.0)


def test_minority_cluster_on_planted_z_scores():
    # the clustering step of the filter, on z-model rows with known theta
    for seed in range(5):
        z, theta = sample_z(ZModelParams.with_norm(64, 5.0, 0.5, 0.1, 2000, seed=seed))
        rows = normalize_nonzero_rows(z)
        t = rows @ leading_right_singular_vector(rows).vector
        bad = defense.minority_cluster(gmm2_fit(t), t)
        assert bad[theta].mean() >= 0.95
        assert (~bad[~theta]).mean() >= 0.98


def test_minority_cluster_tie_prefers_far_cluster():
    t = np.r_[np.full(5, 0.1), np.full(5, -0.9)]
    g = gmm2_fit(t)
    np.testing.assert_array_equal(defense.minority_cluster(g, t), t < 0)


def _two_image_dataset(n_clean=90, n_poison=10):
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 255, 16), rng.uniform(0, 255, 16)
    images = np.r_[np.tile(a, (n_clean, 1)), np.tile(b, (n_poison, 1)), rng.uniform(0, 255, (60, 16))]
    labels = np.r_[np.zeros(n_clean + n_poison, int), np.arange(60) % 2 + 1]
    flags = np.r_[np.zeros(n_clean, bool), np.ones(n_poison, bool), np.zeros(60, bool)]
    return poisonlab.Dataset(images, labels, (4, 4, 1), 3, poisoned_flags=flags)


def test_duplicate_point_masses_split_perfectly():
    data = _two_image_dataset()
    net = nn.init_mlp(16, (8,), 3, seed=1, input_scale=2 / 255, input_offset=127.5)
    res = defense.filter_poisoned(net, data, 0, 1)
    c = res.confusion(data)
    assert (c["sensitivity"], c["specificity"]) == (1.0, 1.0)


def test_identical_rows_take_the_warning_path():
    data = _two_image_dataset(n_clean=50, n_poison=0)
    net = nn.init_mlp(16, (8,), 3, seed=1, input_scale=2 / 255, input_offset=127.5)
    with pytest.warns(RuntimeWarning, match="single cluster"):
        res = defense.filter_poisoned(net, data, 0, 1)
    assert len(res.poisoned_ids) == 0 and len(res.clean_ids) == 50


def test_filter_desk_run(poisoned_run):
    train, _, spec, net = poisoned_run
    res = defense.filter_poisoned(net, train, spec.target_class, spec.base_class)
    c = res.confusion(train)
    assert c["sensitivity"] >= 0.85 and c["specificity"] >= 0.95
    assert res.label_used == spec.base_class
    # gradients at the target label separate at least as well
    alt = defense.filter_poisoned(net, train, spec.target_class, spec.base_class, label=spec.target_class)
    assert alt.confusion(train)["sensitivity"] >= 0.85


def test_target_equals_base_rejected(poisoned_run):
    train, _, _, net = poisoned_run
    with pytest.raises(ValueError, match="differ"):
        defense.filter_poisoned(net, train, 1, 1)


def test_detect_desk_run(poisoned_run):
    train, _, spec, net = poisoned_run
    rep = defense.detect_poison_classes(net, train)
    assert rep.flagged and rep.ratio > 2.0
    assert (rep.target_class, rep.base_class) == (spec.target_class, spec.base_class)
    assert max(rep.per_class_w2, key=rep.per_class_w2.get) == spec.target_class
    assert set(rep.per_class_mean_abs_component) == set(range(6)) - {spec.target_class}


def test_detect_clean_run(clean_run):
    train, _, net = clean_run
    rep = defense.detect_poison_classes(net, train)
    assert not rep.flagged
    assert rep.target_class is None and rep.base_class is None
    assert rep.ratio <= 2.0


def test_detect_needs_three_classes():
    rng = np.random.default_rng(0)
    data = poisonlab.Dataset(rng.uniform(0, 1, (20, 4)), np.arange(20) % 2, (2, 2, 1), 2)
    with pytest.raises(ValueError, match=">= 3 classes"):
        defense.detect_poison_classes(nn.init_mlp(4, (3,), 2), data)


def test_counter_poison_rho_zero_is_identity(poisoned_run):
    train, _, spec, net = poisoned_run
    ids = np.flatnonzero(train.poisoned_flags)
    out, signals = defense.counter_poison_augment(net, train, ids, spec.target_class,
                                                  defense.NeutralizeConfig(rho=0.0))
    np.testing.assert_array_equal(out.images, train.images)
    assert set(signals) == set(range(6)) - {spec.target_class}


def test_counter_poison_clips_and_spares_target(poisoned_run):
    train, _, spec, net = poisoned_run
    ids = np.flatnonzero(train.poisoned_flags)
    out, _ = defense.counter_poison_augment(net, train, ids, spec.target_class,
                                            defense.NeutralizeConfig(rho=5000.0))
    assert out.images.min() >= 0.0 and out.images.max() <= 255.0
    tgt = train.indices_of(spec.target_class)
    np.testing.assert_array_equal(out.images[tgt], train.images[tgt])
    assert not np.array_equal(out.images, train.images)


def test_counter_poison_requires_samples(poisoned_run):
    train, _, spec, net = poisoned_run
    with pytest.raises(ValueError):
        defense.counter_poison_augment(net, train, [], spec.target_class)


def test_counter_poison_step_size(monkeypatch):
    # constructed uniform-magnitude unit vector on 32x32x3 images
    n = 32 * 32 * 3
    v = np.full(n, 1 / np.sqrt(n))
    monkeypatch.setattr(defense, "extract_signal",
                        lambda gm, **kw: defense.PoisonSignal(v, gm.label_used, kw.get("source"), 1.0))
    monkeypatch.setattr(defense, "principal_scores", lambda gm, sig: np.ones(len(gm)))
    data = poisonlab.Dataset(np.full((6, n), 100.0), np.arange(6) % 3, (32, 32, 3), 3)
    net = nn.init_mlp(n, (4,), 3, seed=0, input_scale=2 / 255, input_offset=127.5)
    out, _ = defense.counter_poison_augment(net, data, [0], 0, defense.NeutralizeConfig(rho=500))
    delta = out.images[data.labels != 0] - 100.0
    np.testing.assert_allclose(delta, 500 / np.sqrt(3072))
    assert delta[0, 0] == pytest.approx(9.02, abs=0.01)


def test_neutralize_desk_run(poisoned_run):
    train, test, spec, net = poisoned_run
    trig = poisonlab.triggered_copy(test, spec)
    before = np.mean(nn.predict(net, trig.images) == spec.base_class)
    clean_before = nn.evaluate(net, test)["accuracy"]
    res = defense.neutralize(net, train, defense.NeutralizeConfig(), nn.TrainConfig(epochs=10))
    assert res.neutralized
    after = np.mean(nn.predict(res.network, trig.images) == spec.base_class)
    assert before <= 0.20 and after >= 0.70
    assert nn.evaluate(res.network, test)["accuracy"] >= clean_before - 0.02
    assert np.all(res.augmented.labels[res.relabeled_ids] == spec.base_class)


def test_neutralize_is_noop_on_clean_data(clean_run):
    train, _, net = clean_run
    res = defense.neutralize(net, train)
    assert res.network is net
    assert not res.neutralized


def test_neutralize_is_deterministic(poisoned_run):
    train, _, _, net = poisoned_run
    a = defense.neutralize(net, train).network
    b = defense.neutralize(net, train).network
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p, q)
