import pytest

from pairscan import bench
from pairscan.detector import DetectorConfig, detect
from pairscan.reverse import REConfig


@pytest.fixture(scope="session")
def bench_cfg():
    return bench.BenchConfig()


@pytest.fixture(scope="session")
def victim_2to2(bench_cfg):
    """A 2to2 perturbation-trigger victim from the benchmark family."""
    return bench.forge_model(bench_cfg, 1100, "2to2", with_clean_twin=False)


@pytest.fixture(scope="session")
def benign_forged(bench_cfg):
    return bench.forge_model(bench_cfg, 1000, None)


def _detector_config(seed, bench_cfg):
    return DetectorConfig(re=REConfig(seed=seed,
                                      learning_rate=bench_cfg.re_learning_rate))


@pytest.fixture(scope="session")
def victim_report(victim_2to2, bench_cfg):
    return detect(victim_2to2.model, victim_2to2.defender_data, "perturbation",
                  _detector_config(victim_2to2.seed, bench_cfg))


@pytest.fixture(scope="session")
def benign_report(benign_forged, bench_cfg):
    return detect(benign_forged.model, benign_forged.defender_data, "perturbation",
                  _detector_config(benign_forged.seed, bench_cfg))
