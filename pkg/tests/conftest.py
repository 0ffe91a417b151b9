import sys

import numpy as np
import pytest

from selftrain.numkit import RngStream
from selftrain.segmodel import ModelParams


@pytest.fixture
def rng():
    return RngStream(1234, 0)


def random_params(seed, in_channels=3, num_classes=3, patch_size=3, hidden=4, scale=1.0):
    """Small random model with non-zero biases (so ReLU kinks are rare)."""
    g = np.random.default_rng(seed)
    d = patch_size * patch_size * in_channels
    return ModelParams(
        W1=g.normal(size=(hidden, d)) * scale,
        b1=g.normal(size=hidden) * 0.5,
        W2=g.normal(size=(num_classes, hidden)) * scale,
        b2=g.normal(size=num_classes) * 0.5,
        patch_size=patch_size,
    )


TINY_DATA = dict(image_size=16, num_train=24, num_devel=4, num_val=6, labeled_fraction=0.25, seed=3)
TINY_STAGE = dict(iters_stage0=30, iters_per_stage=10, num_stages=2, batch_size=4, patch_size=3, hidden=6)


def tiny_split():
    from selftrain.synthgen import GenConfig, make_split

    return make_split(GenConfig(**TINY_DATA))


def tiny_stage_cfg(**kw):
    from selftrain.engine import StageConfig

    return StageConfig(**{**TINY_STAGE, **kw})


@pytest.fixture(scope="session")
def split():
    return tiny_split()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
