import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from darkstream import nn
from darkstream.anonymizer import Pipeline
from darkstream.audio import AudioBuffer
from darkstream.errors import DoubleFlush, StateMismatch
from darkstream.streaming import (
    AttentionBlock,
    Conv,
    ConvNeXtBlock,
    ConvTranspose,
    DepthwiseConv,
    LatencyReport,
    ResidualBlock,
    RingKVCache,
    WindowedInstanceNorm,
    algorithmic_delay_ms,
    flush,
    measure_latency,
    run_stream,
    step,
)
from darkstream.weights import init_random

from conftest import small_config
from test_nn import rand_attn_params, rand_res_params


def stream_layer(layer, x, cuts):
    """Feed ``x`` (C, T) to ``layer.step`` split at ``cuts``."""
    state = layer.new_state()
    bounds = [0] + sorted(cuts) + [x.shape[1]]
    outs = [layer.step(state, x[:, a:b]) for a, b in zip(bounds, bounds[1:])]
    return np.concatenate(outs, axis=1)


def make_layer(kind, r):
    c = 4
    if kind == "conv":
        return Conv(r.normal(size=(c, c, 3)), r.normal(size=c), dilation=2)
    if kind == "strided":
        return Conv.end_aligned(r.normal(size=(c, c, 8)), r.normal(size=c), 4)
    if kind == "transpose":
        return ConvTranspose(r.normal(size=(c, 3, 6)), r.normal(size=3), 3)
    if kind == "depthwise":
        return DepthwiseConv(r.normal(size=(c, 7)), r.normal(size=c))
    if kind == "residual":
        return ResidualBlock(rand_res_params(r, c))
    if kind == "convnext":
        p = {"dw.weight": r.normal(size=(c, 7)), "dw.bias": r.normal(size=c), "ln.gain": np.ones(c),
             "ln.bias": np.zeros(c), "pw1.weight": r.normal(size=(4 * c, c)), "pw1.bias": r.normal(size=4 * c),
             "pw2.weight": r.normal(size=(c, 4 * c)), "pw2.bias": r.normal(size=c)}
        return ConvNeXtBlock(p)
    if kind == "attention":
        return AttentionBlock(rand_attn_params(r, 8), heads=2, window=7)
    if kind == "winnorm":
        return WindowedInstanceNorm(c, window=9)
    raise KeyError(kind)


LAYERS = ["conv", "strided", "transpose", "depthwise", "residual", "convnext", "attention", "winnorm"]


@pytest.mark.parametrize("kind", LAYERS)
@given(st.integers(1, 60), st.lists(st.integers(0, 60), max_size=8), st.integers(0, 2**31 - 1))
def test_layer_stream_equals_forward(kind, t, cuts, seed):
    r = np.random.default_rng(seed)
    layer = make_layer(kind, r)
    c = 8 if kind == "attention" else 4
    x = r.normal(size=(c, t))
    ref = layer.forward(x)
    got = stream_layer(layer, x, [min(v, t) for v in cuts])
    n = got.shape[1]
    # a strided layer emits only whole stride blocks; the rest waits for more input
    assert n == ref.shape[1]
    assert np.max(np.abs(got - ref), initial=0.0) < 1e-5 * max(1.0, np.max(np.abs(ref), initial=0.0))


@pytest.mark.parametrize("kind", LAYERS)
def test_layer_causality(kind, rng):
    layer = make_layer(kind, rng)
    c = 8 if kind == "attention" else 4
    x = rng.normal(size=(c, 40))
    ref = layer.forward(x)
    rate = ref.shape[1] / x.shape[1]
    for t in (3, 17, 39):
        x2 = x.copy()
        x2[:, t] += 1.0
        y = layer.forward(x2)
        # outputs strictly before the perturbed input's earliest influence
        keep = int(np.floor(t * rate)) if rate >= 1 else t // int(round(1 / rate))
        assert np.array_equal(y[:, :keep], ref[:, :keep])


def test_end_aligned_frame_count_and_dependency(rng):
    layer = Conv.end_aligned(rng.normal(size=(2, 2, 8)), rng.normal(size=2), 4)
    x = rng.normal(size=(2, 23))
    y = layer.forward(x)
    assert y.shape[1] == 23 // 4
    x2 = x.copy()
    x2[:, 8] += 1.0
    y2 = layer.forward(x2)
    # input 8 belongs to block 2 (samples 8..11)
    assert np.array_equal(y[:, :2], y2[:, :2]) and not np.array_equal(y[:, 2], y2[:, 2])


# -- ring cache ---------------------------------------------------------------

def test_ring_cache_keeps_latest():
    cache = RingKVCache(3, 1, 1)
    for i in range(5):
        cache.write(np.full((1, 1, 1), i), np.full((1, 1, 1), 10 + i), np.array([i]))
    k, v, pos = cache.ordered()
    assert pos.tolist() == [2, 3, 4]
    assert k.ravel().tolist() == [2, 3, 4] and v.ravel().tolist() == [12, 13, 14]


def test_ring_cache_oversized_write():
    cache = RingKVCache(4, 1, 1)
    cache.write(np.arange(6.0).reshape(6, 1, 1), np.zeros((6, 1, 1)), np.arange(6))
    assert cache.ordered()[2].tolist() == [2, 3, 4, 5]


def test_attention_stream_past_window(rng):
    """A long stream exercises cache wrap-around against the offline mask."""
    layer = AttentionBlock(rand_attn_params(rng, 8), heads=2, window=100)
    x = rng.normal(size=(8, 260))
    got = stream_layer(layer, x, list(range(7, 260, 13)))
    assert np.max(np.abs(got - layer.forward(x))) < 1e-9


def test_attention_ignores_frames_older_than_window(rng):
    layer = AttentionBlock(rand_attn_params(rng, 8), heads=2, window=100)
    x = rng.normal(size=(8, 220))
    ref = layer.forward(x)
    x2 = x.copy()
    x2[:, :100] = rng.normal(size=(8, 100))
    assert np.array_equal(layer.forward(x2)[:, 199:], ref[:, 199:])


# -- full pipeline --------------------------------------------------------------

@pytest.fixture(scope="module")
def pipelines():
    out = {}
    for la in (0, 1, 3, 7, 14):
        cfg = small_config(la_frames=la)
        out[la] = Pipeline(cfg, init_random(cfg, 42))
    return out


@pytest.mark.parametrize("la", [0, 1, 3, 7, 14])
def test_pipeline_stream_equals_offline(pipelines, la):
    pipe = pipelines[la]
    x = np.random.default_rng(la).normal(scale=0.3, size=16000 + 123)
    ref = pipe.forward(x)
    outs = {c: run_stream(pipe, x, c) for c in (20, 60, 100)}
    for c, y in outs.items():
        assert y.shape == x.shape
        assert np.max(np.abs(y - ref)) < 1e-4, c
    assert np.max(np.abs(outs[20] - outs[100])) <= 1e-5


def test_pipeline_causality_with_lookahead(pipelines):
    la = 3
    pipe = pipelines[la]
    x = np.random.default_rng(0).normal(scale=0.3, size=9600)
    ref = pipe.forward(x)
    for s in (1000, 4000, 6100):
        x2 = x.copy()
        x2[s + la * 320 + 320 :] += 0.5
        y = pipe.forward(x2)
        assert np.array_equal(y[: s + 1], ref[: s + 1])


def test_state_guards(small_pipeline):
    other = Pipeline(small_config(la_frames=0), init_random(small_config(la_frames=0), 1))
    state = small_pipeline.make_state()
    with pytest.raises(StateMismatch):
        step(other, state, np.zeros(320))
    flush(small_pipeline, state)
    with pytest.raises(DoubleFlush):
        flush(small_pipeline, state)
    with pytest.raises(DoubleFlush):
        step(small_pipeline, state, np.zeros(320))


def test_independent_streams_share_weights(small_pipeline, rng):
    a, b = rng.normal(size=3200), rng.normal(size=3200)
    sa, sb = small_pipeline.make_state(), small_pipeline.make_state()
    ya, yb = [], []
    for i in range(0, 3200, 960):
        ya.append(step(small_pipeline, sa, a[i : i + 960]))
        yb.append(step(small_pipeline, sb, b[i : i + 960]))
    ya.append(flush(small_pipeline, sa))
    yb.append(flush(small_pipeline, sb))
    assert np.array_equal(np.concatenate(ya), run_stream(small_pipeline, a, 60))
    assert np.array_equal(np.concatenate(yb), run_stream(small_pipeline, b, 60))


# -- latency ------------------------------------------------------------------

@given(st.integers(10, 1000), st.sampled_from([0, 20, 60, 140, 280]))
def test_algorithmic_delay(chunk, la):
    assert algorithmic_delay_ms(chunk, la) == chunk + la


def test_measure_latency_with_fake_clock(small_pipeline):
    ticks = iter(np.arange(0, 1000, 0.01))
    rep = measure_latency(small_pipeline, AudioBuffer(np.zeros(16000)), 100, clock=lambda: next(ticks))
    assert rep.algorithmic_ms == 100 + small_pipeline.config.la_ms
    assert rep.compute_ms["mean"] == pytest.approx(10.0)
    assert rep.total_ms == pytest.approx(rep.algorithmic_ms + 10.0)
    assert rep.rtf == pytest.approx(0.01)
    assert LatencyReport.from_text(rep.to_text()) == rep
