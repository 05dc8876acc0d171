import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from darkstream.anonymizer import Pipeline, PipelineConfig
from darkstream.encoder import EncoderConfig
from darkstream.weights import init_random

settings.register_profile(
    "darkstream", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("darkstream")

ACCEPTANCE_LINES = []


def small_config(variant="wave", la_frames=3, contextual=True, **kw) -> PipelineConfig:
    """Narrow pipeline with the full-size rates, windows and topology."""
    enc = EncoderConfig(
        variant=variant,
        lookahead_frames=la_frames,
        contextual=contextual,
        channels=(8, 16, 16, 32),
        input_channels=4,
        content_dim=32,
        attn_layers=2,
        heads=4,
        convnext_dims=(16, 16, 32, 32),
    )
    return PipelineConfig(encoder=enc, decoder_channels=(16, 8, 8, 4), spk_dim=16, prosody_hidden=8, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pipeline():
    cfg = small_config()
    return Pipeline(cfg, init_random(cfg, 42))


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, passed, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
