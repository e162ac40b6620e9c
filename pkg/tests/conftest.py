import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from loramixer.lora import LoraConfig
from loramixer.mixer import attach_mixers
from loramixer.numerics import Tensor
from loramixer.workbench import ModelConfig, ToyModel, default_specs, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = ModelConfig(vocab=16, seq_len=10, d_model=8, n_heads=2, n_blocks=1)


def small_model(seed=0, num_experts=4, randomize=True, cfg=SMALL, lora=None):
    """A one-block model with q/v mixers; experts and routers moved off their init when ``randomize``."""
    from dataclasses import replace

    model = ToyModel(replace(cfg, seed=seed))
    rng = np.random.default_rng([seed, 99])
    model.head_weight = Tensor(rng.normal(0, 0.5, model.head_weight.shape))
    lora = lora or LoraConfig(r=2, lora_alpha=4.0, dropout_p=0.0)
    layers = attach_mixers(model, lora, num_experts, seed=seed)
    if randomize:
        for layer in layers:
            layer.router.gate_weight.data = rng.normal(0, 0.5, layer.router.gate_weight.shape)
            for e in layer.experts:
                e.B.data = rng.normal(0, 0.1, e.B.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_splits():
    return generate_dataset(default_specs(0, 16, 10), 40, 0)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
