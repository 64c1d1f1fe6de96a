import numpy as np
import pytest

from ltd.backbone import BackboneConfig, init_random_backbone
from ltd.synthetic import gen_synthetic_dataset
from ltd.train import TrainConfig, train

BENCH_SEEDS = {"train": 11, "val": 12, "test": 13, "backbone": 0, "head": 0}


@pytest.fixture(scope="session")
def toy_weights():
    return init_random_backbone(BackboneConfig.toy(), BENCH_SEEDS["backbone"])


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Tiny train/val split for fast pipeline tests."""
    root = tmp_path_factory.mktemp("small")
    tr = gen_synthetic_dataset(24, 32, 101, str(root / "train"))
    va = gen_synthetic_dataset(8, 32, 102, str(root / "val"))
    return tr, va


@pytest.fixture(scope="session")
def bench_data(tmp_path_factory):
    """The toy benchmark: 200/class train, 50/class validation, 100/class held out."""
    root = tmp_path_factory.mktemp("bench")
    return {
        "train": gen_synthetic_dataset(200, 32, BENCH_SEEDS["train"], str(root / "train")),
        "val": gen_synthetic_dataset(50, 32, BENCH_SEEDS["val"], str(root / "val")),
        "test": gen_synthetic_dataset(100, 32, BENCH_SEEDS["test"], str(root / "test")),
        "root": root,
    }


@pytest.fixture(scope="session")
def bench_run(bench_data, toy_weights):
    import time

    t0 = time.perf_counter()
    log_path = bench_data["root"] / "train_log.jsonl"
    result = train(bench_data["train"], bench_data["val"], toy_weights,
                   TrainConfig.toy(seed=BENCH_SEEDS["head"]), log_path=str(log_path), threads=1)
    return {"result": result, "seconds": time.perf_counter() - t0, "log": log_path}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for k in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[k])
