import numpy as np
import pytest

from conceptlrp.zoo.models import build_toy_detector, build_toy_pid
from conceptlrp.zoo.scenes import Dataset, SceneConfig, gen_dataset


@pytest.fixture(scope="session")
def pid_hand():
    return build_toy_pid("handcrafted")


@pytest.fixture(scope="session")
def det_hand():
    return build_toy_detector("handcrafted")


@pytest.fixture(scope="session")
def data_seed0(tmp_path_factory):
    root = tmp_path_factory.mktemp("seed0")
    gen_dataset(SceneConfig(), 40, 0, root)
    return Dataset(root)


@pytest.fixture(scope="session")
def data_cars(tmp_path_factory):
    root = tmp_path_factory.mktemp("cars")
    gen_dataset(SceneConfig(cars=(1, 1)), 30, 3, root)
    return Dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_pid(tmp_path_factory):
    """Toy-pid trained on 200 seed-0 scenes, plus a 150-scene seed-1 held-out set."""
    import time

    from conceptlrp.zoo.train import train_sgd

    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("train")
    gen_dataset(SceneConfig(), 200, 0, root / "train")
    gen_dataset(SceneConfig(), 150, 1, root / "test")
    train, test = Dataset(root / "train"), Dataset(root / "test")
    model, history = train_sgd(build_toy_pid("random", seed=0), train, 30, 0.1, seed=0, batch_size=8)
    return {"model": model, "history": history, "train": train, "test": test,
            "seconds": time.perf_counter() - t0}
