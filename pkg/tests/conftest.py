import numpy as np
import pytest

from promptmoe.backbone import ModelConfig
from promptmoe.synth import LabeledSet

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=2, router_hidden=8, head_hidden=16, n_classes=3,
                   prompt_len=4)


def toy_set(n_per_class: int, n_classes: int = 3, seed: int = 0, offset: int = 0) -> LabeledSet:
    """Linearly separable spectrograms: class c lights up frequency band c."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    rng.shuffle(labels)
    specs = rng.random((len(labels), 128, 128)).astype(np.float32) * 0.5
    for i, c in enumerate(labels):
        specs[i, 16 * c:16 * c + 16, :] += 2.0
    return LabeledSet(specs, labels, np.arange(len(labels)) + offset)


@pytest.fixture
def tiny_cfg():
    return TINY


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
