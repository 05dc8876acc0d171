"""Shared helpers for the demo scripts."""

import numpy as np

from darkstream.anonymizer import Pipeline, PipelineConfig
from darkstream.encoder import EncoderConfig
from darkstream.weights import init_random


def narrow_config(la_frames=3, **kw) -> PipelineConfig:
    """Full-size rates and topology with thin channels, so demos run in seconds."""
    enc = EncoderConfig(
        lookahead_frames=la_frames,
        channels=(8, 16, 16, 32),
        input_channels=4,
        content_dim=32,
        attn_layers=2,
        heads=4,
        convnext_dims=(16, 16, 32, 32),
    )
    return PipelineConfig(encoder=enc, decoder_channels=(16, 8, 8, 4), spk_dim=16, prosody_hidden=8, **kw)


def narrow_pipeline(la_frames=3, seed=42, **kw) -> Pipeline:
    cfg = narrow_config(la_frames, **kw)
    return Pipeline(cfg, init_random(cfg, seed))


def tone(seconds=2.0, seed=0):
    """A wobbling tone with a little noise, at 16 kHz."""
    n = int(16000 * seconds)
    t = np.arange(n) / 16000
    f = 180 + 40 * np.sin(2 * np.pi * 3 * t)
    x = 0.3 * np.sin(2 * np.pi * np.cumsum(f) / 16000)
    return x + 0.02 * np.random.default_rng(seed).standard_normal(n)
