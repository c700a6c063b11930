import numpy as np
import pytest

from spinectx.network import ModelConfig, init_params, preset_rates
from spinectx.phantom import PhantomSpec, phantom_set
from spinectx.training import TrainConfig, evaluate, phantom_cases, train

# desk recipe shared by the benchmark tests and the trained fixtures
DESK_SEED = 42
DESK_TRAIN_SEEDS = list(range(100, 108))
DESK_VAL_SEEDS = [200, 201]
DESK_TEST_SEEDS = list(range(300, 306))


def desk_model(preset: str = "default") -> ModelConfig:
    return ModelConfig(encoder_widths=(4, 8, 16), bottleneck_width=32, context_branch_width=8,
                       dilation_rates=preset_rates(preset), patch_shape=(32, 64, 64))


def desk_train_config(preset: str = "default") -> TrainConfig:
    return TrainConfig(desk_model(preset), epochs=10, steps_per_epoch=20, batch_size=4,
                       learning_rate=1e-3, seed=DESK_SEED)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_config():
    return ModelConfig(encoder_widths=(2, 3, 4), bottleneck_width=4, context_branch_width=2,
                       patch_shape=(8, 8, 8))


@pytest.fixture(scope="session")
def micro_params(micro_config):
    return init_params(micro_config, seed=3)


@pytest.fixture(scope="session")
def phantom_base():
    return PhantomSpec()


class TrainedRun:
    def __init__(self, preset):
        import time
        t0 = time.perf_counter()
        base = PhantomSpec()
        result = train(desk_train_config(preset), phantom_set(base, DESK_TRAIN_SEEDS),
                       phantom_set(base, DESK_VAL_SEEDS))
        self.train_seconds = time.perf_counter() - t0
        self.result = result
        self.checkpoint = result.checkpoint
        rows, failures = evaluate(self.checkpoint, phantom_cases(base, DESK_TEST_SEEDS))
        assert not failures
        self.rows = rows
        self.mean_dice = next(r["dice"] for r in rows if r["case_id"] == "mean")
        self.total_seconds = time.perf_counter() - t0


_RUNS = {}


def trained_run(preset: str) -> TrainedRun:
    if preset not in _RUNS:
        _RUNS[preset] = TrainedRun(preset)
    return _RUNS[preset]


@pytest.fixture(scope="session")
def trained_default():
    return trained_run("default")


@pytest.fixture(scope="session")
def trained_narrow():
    return trained_run("abl-1")


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        verdict, title, secs, detail = RESULTS[n]
        line = f"criterion {n:>2} {verdict}  {title} ({secs:.1f}s)"
        terminalreporter.write_line(line + (f"  -- {detail}" if detail else ""))
