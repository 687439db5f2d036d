import numpy as np
import pytest

from gradshield import nn, poisonlab


def desk_task(seed: int, poisoned: bool = True):
    """Small version of the default pipeline task: returns (train, test, spec)."""
    train = poisonlab.make_synthetic_image_task(6, (16, 16, 1), 200, 20.0, seed=seed)
    test = poisonlab.make_synthetic_image_task(6, (16, 16, 1), 100, 20.0, seed=seed + 1000)
    spec = None
    if poisoned:
        tgt, base = np.random.default_rng([seed, 1]).choice(6, 2, replace=False)
        spec = poisonlab.PoisonSpec.random_dot(train.shape, int(tgt), int(base), 0.1, seed=seed, size=3)
        train = poisonlab.poison_dataset(train, spec, seed=seed)
    return train, test, spec


def desk_net(train, seed: int, epochs: int = 10):
    net = nn.init_mlp(train.n_pixels, (128,), train.class_count, seed=seed,
                      input_scale=2 / 255, input_offset=127.5)
    return nn.train(net, train, nn.TrainConfig(epochs=epochs, seed=seed)).network


@pytest.fixture(scope="session")
def poisoned_run():
    train, test, spec = desk_task(0)
    return train, test, spec, desk_net(train, 0)


@pytest.fixture(scope="session")
def clean_run():
    train, test, _ = desk_task(4, poisoned=False)
    return train, test, desk_net(train, 4)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
