"""Stateful chunk processing with exact offline equivalence.

Every layer exposes two paths:

* ``forward(x)`` - whole-sequence evaluation built on :mod:`darkstream.nn`;
* ``step(state, x)`` - consumes the next frames and returns every output
  frame that is fully determined by the input seen so far.

Streaming keeps only what the receptive field needs: left-context buffers
for convolutions, a short history for transposed convolutions, and a
:class:`RingKVCache` per attention layer.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import DoubleFlush, StateMismatch


# -- layers ---------------------------------------------------------------

class Layer:
    def forward(self, x):
        raise NotImplementedError

    def new_state(self):
        return None

    def step(self, state, x):
        raise NotImplementedError


class Pointwise(Layer):
    """Frame-independent map; needs no state."""

    def __init__(self, fn):
        self.fn = fn

    def forward(self, x):
        return self.fn(x)

    def step(self, state, x):
        return self.fn(x)


@dataclass
class ConvBuffer:
    frames: np.ndarray


class Conv(Layer):
    """Convolution over a stream with ``left_pad`` zeros of history at start.

    ``left_pad=(K-1)*dilation`` gives the usual causal convolution.
    ``left_pad=(K-1)*dilation - (stride-1)`` aligns strided outputs to the
    END of each stride block, so ``T`` inputs yield ``floor(T/stride)``
    outputs and output ``t`` depends on inputs ``<= (t+1)*stride - 1``.
    ``right_pad`` only affects :meth:`forward`; a stream realises it by
    feeding zeros at flush.
    """

    def __init__(self, w, b, stride=1, dilation=1, left_pad=None, right_pad=0):
        self.w, self.b = w, b
        self.taps = nn.tap_major(w)
        self.stride, self.dilation = stride, dilation
        self.span = (w.shape[2] - 1) * dilation
        self.left_pad = self.span if left_pad is None else left_pad
        self.right_pad = right_pad

    @classmethod
    def end_aligned(cls, w, b, stride):
        span = w.shape[2] - 1
        if span < stride - 1:
            raise ValueError("kernel must be at least as long as the stride")
        return cls(w, b, stride=stride, left_pad=span - (stride - 1))

    def forward(self, x):
        return nn.conv1d(x, self.w, self.b, self.stride, self.dilation,
                         pad=(self.left_pad, self.right_pad), taps=self.taps)

    def new_state(self):
        return ConvBuffer(np.zeros((self.w.shape[1], self.left_pad)))

    def step(self, state, x):
        buf = np.concatenate([state.frames, x], axis=1) if state.frames.shape[1] else x
        n = buf.shape[1]
        n_out = (n - self.span - 1) // self.stride + 1 if n > self.span else 0
        if n_out <= 0:
            state.frames = buf
            return np.zeros((self.w.shape[0], 0))
        y = nn.conv1d(buf, self.w, self.b, self.stride, self.dilation, pad=(0, 0), taps=self.taps)
        state.frames = buf[:, n_out * self.stride :]
        return y[:, :n_out]


class ConvTranspose(Layer):
    """Causal transposed convolution (``T`` frames -> ``T*stride`` samples)."""

    def __init__(self, w, b, stride):
        self.w, self.b, self.stride = w, b, stride
        self.taps = nn.tap_major(w, transposed=True)
        self.history = math.ceil(w.shape[2] / stride) - 1

    def forward(self, x):
        return nn.conv_transpose1d(x, self.w, self.b, self.stride, causal=True, taps=self.taps)

    def new_state(self):
        return ConvBuffer(np.zeros((self.w.shape[0], self.history)))

    def step(self, state, x):
        n = x.shape[1]
        if n == 0:
            return np.zeros((self.w.shape[1], 0))
        buf = np.concatenate([state.frames, x], axis=1)
        y = nn.conv_transpose1d(buf, self.w, self.b, self.stride, causal=True, taps=self.taps)
        state.frames = buf[:, buf.shape[1] - self.history :]
        return y[:, -n * self.stride :]


class DepthwiseConv(Layer):
    def __init__(self, w, b):
        self.w, self.b = w, b
        self.span = w.shape[1] - 1

    def forward(self, x):
        return nn.depthwise_conv1d(x, self.w, self.b)

    def new_state(self):
        return ConvBuffer(np.zeros((self.w.shape[0], self.span)))

    def step(self, state, x):
        buf = np.concatenate([state.frames, x], axis=1)
        y = nn.depthwise_conv1d(buf, self.w, self.b, causal=False)
        state.frames = buf[:, buf.shape[1] - self.span :]
        return y


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def new_state(self):
        return [layer.new_state() for layer in self.layers]

    def step(self, state, x):
        for layer, st in zip(self.layers, state):
            x = layer.step(st, x)
        return x


class ParallelMean(Layer):
    """Average of several same-rate branches (HiFi-GAN multi-receptive-field fusion)."""

    def __init__(self, branches):
        self.branches = list(branches)

    def forward(self, x):
        return sum(b.forward(x) for b in self.branches) / len(self.branches)

    def new_state(self):
        return [b.new_state() for b in self.branches]

    def step(self, state, x):
        return sum(b.step(s, x) for b, s in zip(self.branches, state)) / len(self.branches)


class ResidualBlock(Layer):
    """Streaming counterpart of :func:`darkstream.nn.residual_block`."""

    def __init__(self, params, kernel=nn.RES_KERNEL, dilations=nn.RES_DILATIONS):
        self.params = params
        self.kernel, self.dilations = kernel, dilations
        self.units = []
        for u, (d1, d2) in enumerate(dilations):
            p = nn.sub(params, f"unit{u}")
            self.units.append((
                Conv(p["conv1.weight"], p["conv1.bias"], dilation=d1),
                Conv(p["conv2.weight"], p["conv2.bias"], dilation=d2),
            ))

    def forward(self, x):
        return nn.residual_block(x, self.params, self.kernel, self.dilations)

    def new_state(self):
        return [(c1.new_state(), c2.new_state()) for c1, c2 in self.units]

    def step(self, state, x):
        for (c1, c2), (s1, s2) in zip(self.units, state):
            h = c1.step(s1, nn.leaky_relu(x))
            h = c2.step(s2, nn.leaky_relu(h))
            x = x + h
        return x


class ConvNeXtBlock(Layer):
    def __init__(self, params):
        self.params = params
        self.dw = DepthwiseConv(params["dw.weight"], params["dw.bias"])

    def forward(self, x):
        return nn.convnext_block(x, self.params)

    def new_state(self):
        return self.dw.new_state()

    def step(self, state, x):
        p = self.params
        h = self.dw.step(state, x)
        h = nn.layer_norm(h.T, p["ln.gain"], p["ln.bias"])
        h = nn.gelu(nn.linear(h, p["pw1.weight"], p["pw1.bias"]))
        h = nn.linear(h, p["pw2.weight"], p["pw2.bias"])
        return x + h.T


class WindowedInstanceNorm(Layer):
    """Per-channel normalisation over the trailing ``window`` frames (causal)."""

    def __init__(self, channels, window=100, eps=1e-5):
        self.channels, self.window, self.eps = channels, window, eps

    def _normalise(self, history, x):
        # history: frames preceding x, at most window-1 of them
        buf = np.concatenate([history, x], axis=1)
        h = history.shape[1]
        out = np.empty_like(x)
        for i in range(x.shape[1]):
            end = h + i + 1
            seg = buf[:, max(0, end - self.window) : end]
            mu = seg.mean(axis=1)
            var = seg.var(axis=1)
            out[:, i] = (x[:, i] - mu) / np.sqrt(var + self.eps)
        return out, buf[:, max(0, buf.shape[1] - (self.window - 1)) :]

    def forward(self, x):
        return self._normalise(np.zeros((x.shape[0], 0)), x)[0]

    def new_state(self):
        return ConvBuffer(np.zeros((self.channels, 0)))

    def step(self, state, x):
        y, state.frames = self._normalise(state.frames, x)
        return y


# -- attention with a ring KV cache ---------------------------------------

class RingKVCache:
    """Fixed-capacity circular store of rotated keys and values.

    Slots that were never written carry position -1 and are masked out, so
    a fresh cache behaves exactly like attention over a shorter history.
    """

    def __init__(self, capacity, heads, head_dim):
        self.capacity = capacity
        self.keys = np.zeros((capacity, heads, head_dim))
        self.values = np.zeros((capacity, heads, head_dim))
        self.positions = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.fill = 0
        self.next_pos = 0

    def ordered(self):
        """Filled entries, oldest first."""
        if self.fill < self.capacity:
            idx = np.arange(self.fill)
        else:
            idx = (self.cursor + np.arange(self.capacity)) % self.capacity
        return self.keys[idx], self.values[idx], self.positions[idx]

    def write(self, k, v, positions):
        n = k.shape[0]
        if n > self.capacity:
            k, v, positions = k[-self.capacity :], v[-self.capacity :], positions[-self.capacity :]
            n = self.capacity
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.keys[idx] = k
        self.values[idx] = v
        self.positions[idx] = positions
        self.cursor = (self.cursor + n) % self.capacity
        self.fill = min(self.capacity, self.fill + n)


def attend_streaming(cache: RingKVCache, new_frames, layer_params, heads=8, window=100):
    """Run one attention block on ``new_frames`` (n, D) using cached history.

    Equivalent to :func:`darkstream.nn.mhsa` evaluated on the full history
    and sliced to the new positions.
    """
    x = np.asarray(new_frames)
    n, d = x.shape
    if n == 0:
        return x
    p = layer_params
    pos = cache.next_pos + np.arange(n)
    h = nn.layer_norm(x, p["ln1.gain"], p["ln1.bias"])
    q, k, v = nn.qkv(h, p, heads, pos)
    ck, cv, cpos = cache.ordered()
    keys = np.concatenate([ck, k])
    vals = np.concatenate([cv, v])
    kpos = np.concatenate([cpos, pos])
    a = nn.attend(q, keys, vals, nn.window_mask(pos, kpos, window)).reshape(n, d)
    x = x + nn.linear(a, p["out.weight"], p["out.bias"])
    out = nn.feed_forward(x, p)
    cache.write(k, v, pos)
    cache.next_pos += n
    return out


class AttentionBlock(Layer):
    """Windowed causal MHSA block on channels-first (D, T) sequences."""

    def __init__(self, params, heads=8, window=100):
        self.params, self.heads, self.window = params, heads, window
        self.dim = params["q.weight"].shape[0]

    def forward(self, x):
        return nn.mhsa(x.T, self.params, self.heads, self.window).T

    def new_state(self):
        return RingKVCache(self.window, self.heads, self.dim // self.heads)

    def step(self, state, x):
        return attend_streaming(state, x.T, self.params, self.heads, self.window).T


# -- pipeline-level state and scheduling ----------------------------------

@dataclass
class StreamState:
    """Mutable per-stream state; owned by exactly one stream."""

    config: object
    layers: dict
    mel: object = None
    samples_in: int = 0
    samples_out: int = 0
    frames_emitted: int = 0
    flushed: bool = False
    target: object = None

    def caches(self):
        """Every :class:`RingKVCache` reachable from this state."""
        found = []

        def walk(s):
            if isinstance(s, RingKVCache):
                found.append(s)
            elif isinstance(s, (list, tuple)):
                for c in s:
                    walk(c)
            elif isinstance(s, dict):
                for c in s.values():
                    walk(c)

        walk(self.layers)
        return found


def make_state(pipeline) -> StreamState:
    """Fresh zeroed state for ``pipeline`` (all caches empty)."""
    return pipeline.make_state()


def step(pipeline, state: StreamState, chunk):
    if state.config != pipeline.config:
        raise StateMismatch("state was built for a different pipeline configuration")
    if state.flushed:
        raise DoubleFlush("stream already flushed")
    return pipeline.step(state, chunk)


def flush(pipeline, state: StreamState):
    if state.config != pipeline.config:
        raise StateMismatch("state was built for a different pipeline configuration")
    return pipeline.flush(state)


def run_stream(pipeline, samples, chunk_ms, target=None):
    """Feed ``samples`` chunk by chunk, flush, and return the concatenated output."""
    from .audio import AudioBuffer, chunk_stream

    state = pipeline.make_state(target)
    outs = [step(pipeline, state, c) for c in chunk_stream(AudioBuffer(samples), chunk_ms)]
    outs.append(flush(pipeline, state))
    return np.concatenate(outs) if outs else np.zeros(0)


# -- latency accounting ---------------------------------------------------

@dataclass
class LatencyReport:
    chunk_ms: float
    lookahead_ms: float
    algorithmic_ms: float
    compute_ms: dict = field(default_factory=dict)
    total_ms: float = 0.0
    rtf: float = 0.0
    streaming_rtf: float = 0.0

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)

    @classmethod
    def from_text(cls, text: str) -> "LatencyReport":
        return cls(**json.loads(text))


def algorithmic_delay_ms(chunk_ms, lookahead_ms):
    return chunk_ms + lookahead_ms


def timed_stream(pipeline, buffer, chunk_ms, target=None, clock=time.perf_counter):
    """Stream ``buffer`` through ``pipeline``, timing every ``step`` call.

    Returns:
        (output samples, per-chunk seconds, flush seconds)
    """
    from .audio import chunk_stream

    state = pipeline.make_state(target)
    outs, per_chunk = [], []
    for c in chunk_stream(buffer, chunk_ms):
        t0 = clock()
        outs.append(step(pipeline, state, c))
        per_chunk.append(clock() - t0)
    t0 = clock()
    outs.append(flush(pipeline, state))
    tail = clock() - t0
    return np.concatenate(outs), per_chunk, tail


def latency_report(chunk_ms, la_ms, per_chunk, tail, offline_s, duration) -> LatencyReport:
    ms = np.asarray(per_chunk, dtype=np.float64) * 1000.0
    mean = float(ms.mean()) if ms.size else 0.0
    algo = algorithmic_delay_ms(chunk_ms, la_ms)
    return LatencyReport(
        chunk_ms=chunk_ms,
        lookahead_ms=la_ms,
        algorithmic_ms=algo,
        compute_ms={"mean": mean, "p95": float(np.percentile(ms, 95)) if ms.size else 0.0},
        total_ms=algo + mean,
        rtf=offline_s / duration,
        streaming_rtf=(float(np.sum(per_chunk)) + tail) / duration,
    )


def measure_latency(pipeline, buffer, chunk_ms, clock=time.perf_counter, target=None) -> LatencyReport:
    """Time a streamed run chunk by chunk plus one whole-utterance pass.

    Algorithmic delay is exact arithmetic (chunk + lookahead); compute time
    is the measured wall-clock cost of each ``step`` call.
    """
    _, per_chunk, tail = timed_stream(pipeline, buffer, chunk_ms, target, clock)
    t0 = clock()
    pipeline.forward(buffer.samples, target)
    offline = clock() - t0
    return latency_report(chunk_ms, pipeline.config.la_ms, per_chunk, tail, offline, buffer.duration)
