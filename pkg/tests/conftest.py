import time
import warnings

import numpy as np
import pytest

from tsrag.arm import ArmConfig, init_arm
from tsrag.backbone import BackboneConfig, pretrain_backbone
from tsrag.core import SplitSpec, generate_motif_corpus, make_pairs, split
from tsrag.evaluation import BenchmarkConfig, build_benchmark
from tsrag.infer import Engine
from tsrag.retrieval import build_kb
from tsrag.train import TrainConfig, train_arm

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
BENCHMARK_SECONDS = 0.0


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


SMALL = BackboneConfig(T=64, L=16, P=16, d=16, seed=3)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_motif_corpus(seed=5, n_series=8, length=400, motif_bank_size=4, noise_std=0.05)


@pytest.fixture(scope="session")
def small_pairs(small_corpus):
    spec = SplitSpec(0.6, 0.2, 0.2)
    train = [split(s, spec)[0] for s in small_corpus]
    return [p for s in train for p in make_pairs(s, SMALL.T, SMALL.L, stride=8)]


@pytest.fixture(scope="session")
def small_test_pairs(small_corpus):
    spec = SplitSpec(0.6, 0.2, 0.2)
    test = [split(s, spec)[2] for s in small_corpus]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [p for s in test for p in make_pairs(s, SMALL.T, SMALL.L, stride=1)]


@pytest.fixture(scope="session")
def small_backbone(small_pairs):
    return pretrain_backbone(small_pairs, SMALL, epochs=5, lr=3e-3, batch_size=32)


@pytest.fixture(scope="session")
def small_kb(small_pairs, small_backbone):
    return build_kb(small_pairs, small_backbone)


@pytest.fixture(scope="session")
def small_arm_config():
    return ArmConfig(k=4, d=SMALL.d, L=SMALL.L, heads=2, seed=1)


@pytest.fixture(scope="session")
def small_trained(small_pairs, small_kb, small_backbone, small_arm_config):
    cfg = TrainConfig(steps=60, batch_size=16, k=4, eval_every=20, seed=2)
    return train_arm(small_pairs, small_kb, small_backbone, init_arm(small_arm_config), cfg)


@pytest.fixture(scope="session")
def small_engine(small_backbone, small_kb, small_trained):
    return Engine(small_backbone, small_trained.params, small_kb, k=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def benchmark():
    """The default desk-scale benchmark: 60 motif series, backbone, KB and trained mixer."""
    global BENCHMARK_SECONDS
    t0 = time.perf_counter()
    bench = build_benchmark(BenchmarkConfig())
    BENCHMARK_SECONDS = time.perf_counter() - t0
    return bench
